#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "infusion/diffusion.hpp"

namespace infusion {

struct MomentPair {
  Point2 mean{};
  Mat2 cov{};

  friend bool operator==(const MomentPair&, const MomentPair&) = default;
};

struct MetricReport {
  std::string metric;
  double value = 0.0;
  std::size_t samples_a = 0;
  std::size_t samples_b = 0;
  nlohmann::json config = nlohmann::json::object();
};

nlohmann::json to_json(const MetricReport& r);

// 1/2 E ||eps_theta(z_t, t, c) - eps_theta'(z_t, t, c)||^2 over latents,
// prompts, n_t timesteps per latent and fresh noise. Both models see the
// same (z_t, t, c) triples. Prompts may not carry concept slots.
MetricReport latent_fisher_divergence(const ScoreModel& theta, const ScoreModel& theta_prime,
                                      const PointSet& eval_latents,
                                      const std::vector<PromptSpec>& prompts,
                                      const NoiseSchedule& sched, int n_t, std::uint64_t seed);

// Sample mean and unbiased covariance; eigenvalues clamped at zero.
MomentPair gaussian_fit(const PointSet& points);

// Symmetric PSD square root by eigendecomposition with eigenvalues clamped at zero.
Mat2 sqrtm_psd(const Mat2& m);

// Closed-form 2-Wasserstein distance between Gaussians.
MetricReport w2_gaussian(const MomentPair& g1, const MomentPair& g2);

// Exact discrete 2-Wasserstein between equal-size point sets by min-cost
// perfect matching on squared Euclidean costs.
MetricReport w2_empirical_oracle(const PointSet& a, const PointSet& b);

// Minimum-cost perfect matching for a square cost matrix (row-major).
// Returns assignment[row] = column.
std::vector<std::size_t> min_cost_assignment(const std::vector<double>& cost, std::size_t n);

inline constexpr std::size_t kDefaultQuorum = 5;
inline constexpr double kDefaultCoverageRadius = 0.45;

// Fraction of centers with at least `quorum` points within `radius`.
double mode_coverage(const PointSet& points, const std::vector<Point2>& centers, double radius,
                     std::size_t quorum = kDefaultQuorum);

// --- step curves -------------------------------------------------------------

struct CheckpointModel {
  std::size_t step = 0;
  DenoiserWeights weights;
  ResidualSet residuals;
  bool dual_stream = false;
};

struct MethodCheckpoints {
  std::string method;
  PromptSpec prompt;  // customized prompt used for sampling
  std::vector<CheckpointModel> checkpoints;
};

struct CurveEvalConfig {
  PointSet fisher_latents;
  std::vector<PromptSpec> fisher_prompts;
  int n_t = 8;
  SamplerConfig sampler;
  std::size_t samples = 1000;
  PromptSpec reference_prompt;
  std::vector<Point2> centers;
  double radius = kDefaultCoverageRadius;
  std::size_t quorum = kDefaultQuorum;
  std::uint64_t seed = 0;
};

struct CurvePoint {
  std::size_t step = 0;
  double fisher = 0.0;
  double w2 = 0.0;
  double coverage = 0.0;
};

struct CurveSeries {
  std::string method;
  std::vector<CurvePoint> points;
};

std::vector<CurveSeries> overfitting_curves(const DenoiserWeights& base,
                                            const std::vector<MethodCheckpoints>& methods,
                                            const CurveEvalConfig& config,
                                            const NoiseSchedule& sched);

// Columns: method,step,fisher,w2,coverage.
std::string curves_to_csv(const std::vector<CurveSeries>& curves);

}  // namespace infusion
