#include "infusion/svg.hpp"

#include <cstdio>

#include "infusion/checkpoint.hpp"
#include "infusion/errors.hpp"

namespace infusion {

namespace {

std::string escape_xml(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string fmt(const char* pattern, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, pattern, args...);
  return buf;
}

}  // namespace

std::string render_scatter_svg(const std::vector<PlotLayer>& layers, const Bounds& bounds,
                               const SvgOptions& options) {
  if (layers.empty()) throw ContractError("render_scatter_svg: no layers");
  if (!(bounds.xmax > bounds.xmin && bounds.ymax > bounds.ymin)) {
    throw ContractError("render_scatter_svg: empty bounds");
  }
  const double size = options.size;
  auto sx = [&](double x) { return (x - bounds.xmin) / (bounds.xmax - bounds.xmin) * size; };
  auto sy = [&](double y) { return (bounds.ymax - y) / (bounds.ymax - bounds.ymin) * size; };
  auto inside = [&](const Point2& p) {
    return p[0] >= bounds.xmin && p[0] <= bounds.xmax && p[1] >= bounds.ymin && p[1] <= bounds.ymax;
  };

  std::string svg = fmt(
      "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"%d\" height=\"%d\" viewBox=\"0 0 %d %d\">\n",
      options.size, options.size, options.size, options.size);
  if (!options.config_hash.empty()) {
    svg += "<!-- config_sha256: " + escape_xml(options.config_hash) + " -->\n";
  }
  svg += fmt("<rect x=\"0\" y=\"0\" width=\"%d\" height=\"%d\" fill=\"#ffffff\"/>\n", options.size,
             options.size);
  if (!options.title.empty()) {
    svg += "<title>" + escape_xml(options.title) + "</title>\n";
  }

  std::size_t clipped = 0;
  for (const auto& layer : layers) {
    svg += "<g fill=\"" + escape_xml(layer.style.color) + "\"" +
           fmt(" fill-opacity=\"%.2f\"", layer.style.opacity) + ">\n";
    for (const auto& p : layer.points.points) {
      if (!inside(p)) {
        if (!bounds.clip) {
          throw ContractError("render_scatter_svg: point outside bounds and clipping disabled");
        }
        ++clipped;
        continue;
      }
      svg += fmt("<circle cx=\"%.2f\" cy=\"%.2f\" r=\"%.2f\"/>\n", sx(p[0]), sy(p[1]), layer.style.radius);
    }
    svg += "</g>\n";
  }

  // Legend: swatch rectangles, one row per named layer.
  int row = 0;
  for (const auto& layer : layers) {
    if (layer.style.name.empty()) continue;
    const int y = 10 + 16 * row++;
    svg += fmt("<rect x=\"10\" y=\"%d\" width=\"10\" height=\"10\" fill=\"%s\"/>\n", y,
               escape_xml(layer.style.color).c_str());
    svg += fmt("<text x=\"26\" y=\"%d\" font-family=\"sans-serif\" font-size=\"11\">%s</text>\n", y + 9,
               escape_xml(layer.style.name).c_str());
  }
  if (clipped) svg += fmt("<!-- clipped: %zu -->\n", clipped);
  svg += "</svg>\n";
  return svg;
}

void write_scatter_svg(const std::vector<PlotLayer>& layers, const Bounds& bounds,
                       const std::filesystem::path& path, const SvgOptions& options) {
  write_file_atomic(path, render_scatter_svg(layers, bounds, options));
}

}  // namespace infusion
