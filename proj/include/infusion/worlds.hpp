#pragma once

#include <array>
#include <cstddef>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "infusion/rng.hpp"

namespace infusion {

using Point2 = std::array<double, 2>;
using Mat2 = std::array<double, 4>;  // row-major 2x2

struct GaussianComponent {
  double weight = 1.0;
  Point2 mean{};
  Mat2 cov{1.0, 0.0, 0.0, 1.0};
};

struct Concept {
  std::string token;
  std::vector<GaussianComponent> components;
};

// Concept tokens mapped to 2-D Gaussian mixtures, in insertion order.
class ConceptWorld {
 public:
  ConceptWorld() = default;
  explicit ConceptWorld(std::string name) : name_(std::move(name)) {}

  void add_concept(std::string token, std::vector<GaussianComponent> components);

  const std::string& name() const { return name_; }
  const std::vector<Concept>& concepts() const { return concepts_; }
  const Concept& find(const std::string& token) const;
  bool contains(const std::string& token) const;
  std::vector<std::string> tokens() const;

  std::vector<Point2> modality_centers(const std::string& token) const;
  // All component means, concepts in order. Indexes LinearTarget carriers.
  std::vector<Point2> all_modality_centers() const;

 private:
  std::string name_;
  std::vector<Concept> concepts_;
};

struct PointSet {
  std::vector<Point2> points;
  std::string label;

  std::size_t size() const { return points.size(); }
  bool empty() const { return points.empty(); }
};

// Segment from anchor_a to anchor_b placed around each carrier modality.
struct LinearTarget {
  Point2 anchor_a{-0.4, -0.4};
  Point2 anchor_b{0.4, 0.4};
  double jitter = 0.05;
  std::vector<std::size_t> carriers;
};

inline constexpr double kWorldSigma = 0.15;
inline constexpr const char* kSuperClassToken = "super";

ConceptWorld build_four_peak_world();
ConceptWorld build_grid25_world();
ConceptWorld build_world(const std::string& name);

// Default carriers of the grid world: the five main-diagonal modalities.
LinearTarget grid25_diagonal_target();

PointSet sample_concept(const ConceptWorld& world, const std::string& concept_token, std::size_t n,
                        Rng& rng);
PointSet sample_custom_target(const LinearTarget& target, const ConceptWorld& world, std::size_t n,
                              Rng& rng);

void validate(const ConceptWorld& world);
void validate(const LinearTarget& target, const ConceptWorld& world);

nlohmann::json world_to_json(const ConceptWorld& world);
ConceptWorld world_from_json(const nlohmann::json& doc);

inline constexpr int kWorldFormatVersion = 1;

}  // namespace infusion
