#include "infusion/worlds.hpp"

#include <algorithm>
#include <cmath>

#include "infusion/errors.hpp"

namespace infusion {

namespace {

GaussianComponent isotropic(Point2 mean, double weight) {
  const double var = kWorldSigma * kWorldSigma;
  return GaussianComponent{weight, mean, {var, 0.0, 0.0, var}};
}

Point2 draw_gaussian(const GaussianComponent& c, Rng& rng) {
  // Cholesky factor of the 2x2 covariance.
  const double l11 = std::sqrt(c.cov[0]);
  const double l21 = c.cov[2] / l11;
  const double l22 = std::sqrt(c.cov[3] - l21 * l21);
  const double u = rng.normal();
  const double v = rng.normal();
  return {c.mean[0] + l11 * u, c.mean[1] + l21 * u + l22 * v};
}

std::size_t pick_component(const std::vector<GaussianComponent>& comps, Rng& rng) {
  if (comps.size() == 1) return 0;
  const double u = rng.uniform();
  double acc = 0.0;
  for (std::size_t i = 0; i < comps.size(); ++i) {
    acc += comps[i].weight;
    if (u < acc) return i;
  }
  return comps.size() - 1;
}

}  // namespace

void ConceptWorld::add_concept(std::string token, std::vector<GaussianComponent> components) {
  if (contains(token)) throw ContractError("duplicate concept token '" + token + "'");
  concepts_.push_back(Concept{std::move(token), std::move(components)});
}

const Concept& ConceptWorld::find(const std::string& token) const {
  for (const auto& c : concepts_)
    if (c.token == token) return c;
  throw LookupError("unknown concept '" + token + "' in world '" + name_ + "'");
}

bool ConceptWorld::contains(const std::string& token) const {
  return std::any_of(concepts_.begin(), concepts_.end(),
                     [&](const Concept& c) { return c.token == token; });
}

std::vector<std::string> ConceptWorld::tokens() const {
  std::vector<std::string> out;
  for (const auto& c : concepts_) out.push_back(c.token);
  return out;
}

std::vector<Point2> ConceptWorld::modality_centers(const std::string& token) const {
  std::vector<Point2> out;
  for (const auto& comp : find(token).components) out.push_back(comp.mean);
  return out;
}

std::vector<Point2> ConceptWorld::all_modality_centers() const {
  std::vector<Point2> out;
  for (const auto& c : concepts_)
    for (const auto& comp : c.components) out.push_back(comp.mean);
  return out;
}

ConceptWorld build_four_peak_world() {
  ConceptWorld w("four-peak");
  w.add_concept("A", {isotropic({-2.0, 2.0}, 1.0)});
  w.add_concept("B", {isotropic({2.0, 2.0}, 1.0)});
  w.add_concept("C", {isotropic({-2.0, -2.0}, 1.0)});
  w.add_concept("D", {isotropic({2.0, -2.0}, 1.0)});
  return w;
}

ConceptWorld build_grid25_world() {
  ConceptWorld w("grid25");
  std::vector<GaussianComponent> comps;
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j < 5; ++j)
      comps.push_back(isotropic({-4.0 + 2.0 * j, 4.0 - 2.0 * i}, 1.0 / 25.0));
  w.add_concept(kSuperClassToken, std::move(comps));
  return w;
}

ConceptWorld build_world(const std::string& name) {
  if (name == "four-peak") return build_four_peak_world();
  if (name == "grid25") return build_grid25_world();
  throw LookupError("unknown builtin world '" + name + "'");
}

LinearTarget grid25_diagonal_target() {
  LinearTarget t;
  // Row-major 5x5 layout: main diagonal indices.
  t.carriers = {0, 6, 12, 18, 24};
  return t;
}

void validate(const ConceptWorld& world) {
  if (world.concepts().empty()) throw ContractError("world has no concepts");
  for (const auto& c : world.concepts()) {
    if (c.components.empty()) throw ContractError("concept '" + c.token + "' has no components");
    double total = 0.0;
    for (const auto& comp : c.components) {
      if (!(comp.weight > 0.0 && comp.weight <= 1.0)) {
        throw ContractError("concept '" + c.token + "': component weight out of (0,1]");
      }
      const double a = comp.cov[0], b = comp.cov[1], d = comp.cov[3];
      if (comp.cov[1] != comp.cov[2] || !(a > 0.0) || !(a * d - b * b > 0.0)) {
        throw ContractError("concept '" + c.token + "': covariance not symmetric positive-definite");
      }
      if (!std::isfinite(comp.mean[0]) || !std::isfinite(comp.mean[1])) {
        throw ContractError("concept '" + c.token + "': non-finite mean");
      }
      total += comp.weight;
    }
    if (std::abs(total - 1.0) > 1e-12) {
      throw ContractError("concept '" + c.token + "': weights sum to " + std::to_string(total));
    }
  }
}

void validate(const LinearTarget& target, const ConceptWorld& world) {
  if (target.carriers.empty()) throw ContractError("linear target has no carrier modalities");
  const std::size_t count = world.all_modality_centers().size();
  for (std::size_t c : target.carriers) {
    if (c >= count) {
      throw ContractError("carrier modality " + std::to_string(c) + " out of range (" +
                          std::to_string(count) + " modalities)");
    }
  }
  if (!(target.jitter >= 0.0)) throw ContractError("linear target jitter must be >= 0");
}

PointSet sample_concept(const ConceptWorld& world, const std::string& concept_token, std::size_t n,
                        Rng& rng) {
  if (n == 0) throw ContractError("sample_concept: n must be >= 1");
  const Concept& c = world.find(concept_token);
  PointSet out;
  out.label = world.name() + ":" + concept_token;
  out.points.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    out.points.push_back(draw_gaussian(c.components[pick_component(c.components, rng)], rng));
  }
  return out;
}

PointSet sample_custom_target(const LinearTarget& target, const ConceptWorld& world, std::size_t n,
                              Rng& rng) {
  if (n == 0) throw ContractError("sample_custom_target: n must be >= 1");
  validate(target, world);
  const auto centers = world.all_modality_centers();
  const long last = static_cast<long>(target.carriers.size()) - 1;
  PointSet out;
  out.label = world.name() + ":linear-target";
  out.points.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const Point2& c = centers[target.carriers[static_cast<std::size_t>(rng.uniform_int(0, last))]];
    const double u = rng.uniform();
    Point2 p;
    for (int k = 0; k < 2; ++k) {
      p[k] = c[k] + target.anchor_a[k] + u * (target.anchor_b[k] - target.anchor_a[k]);
    }
    if (target.jitter > 0.0) {
      p[0] += target.jitter * rng.normal();
      p[1] += target.jitter * rng.normal();
    }
    out.points.push_back(p);
  }
  return out;
}

nlohmann::json world_to_json(const ConceptWorld& world) {
  nlohmann::json concepts = nlohmann::json::array();
  for (const auto& c : world.concepts()) {
    nlohmann::json comps = nlohmann::json::array();
    for (const auto& comp : c.components) {
      comps.push_back({{"weight", comp.weight}, {"mean", comp.mean}, {"cov", comp.cov}});
    }
    concepts.push_back({{"token", c.token}, {"components", comps}});
  }
  return {{"format_version", kWorldFormatVersion},
          {"kind", "concept-world"},
          {"name", world.name()},
          {"concepts", concepts}};
}

ConceptWorld world_from_json(const nlohmann::json& doc) {
  if (doc.value("format_version", 0) != kWorldFormatVersion) {
    throw MigrationError("unsupported world format_version " +
                         std::to_string(doc.value("format_version", 0)));
  }
  try {
    ConceptWorld w(doc.at("name").get<std::string>());
    for (const auto& c : doc.at("concepts")) {
      std::vector<GaussianComponent> comps;
      for (const auto& comp : c.at("components")) {
        comps.push_back(GaussianComponent{comp.at("weight").get<double>(),
                                          comp.at("mean").get<Point2>(),
                                          comp.at("cov").get<Mat2>()});
      }
      w.add_concept(c.at("token").get<std::string>(), std::move(comps));
    }
    validate(w);
    return w;
  } catch (const nlohmann::json::exception& e) {
    throw ContractError(std::string("malformed world document: ") + e.what());
  }
}

}  // namespace infusion
