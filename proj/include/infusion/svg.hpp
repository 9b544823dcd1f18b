#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "infusion/worlds.hpp"

namespace infusion {

struct PointStyle {
  std::string name;
  std::string color = "#1f77b4";
  double radius = 1.6;
  double opacity = 0.6;
};

struct PlotLayer {
  PointSet points;
  PointStyle style;
};

struct Bounds {
  double xmin = -1.0, xmax = 1.0, ymin = -1.0, ymax = 1.0;
  // When false, every point must lie inside; when true outside points are dropped.
  bool clip = false;
};

struct SvgOptions {
  int size = 480;  // square canvas, pixels
  std::string title;
  std::string config_hash;
};

// Deterministic scatter plot: fixed element order and two-decimal coordinates.
std::string render_scatter_svg(const std::vector<PlotLayer>& layers, const Bounds& bounds,
                               const SvgOptions& options = {});
void write_scatter_svg(const std::vector<PlotLayer>& layers, const Bounds& bounds,
                       const std::filesystem::path& path, const SvgOptions& options = {});

}  // namespace infusion
