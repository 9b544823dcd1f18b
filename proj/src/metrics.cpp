#include "infusion/metrics.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>

#include "infusion/errors.hpp"

namespace infusion {

namespace {

Eigen::Matrix2d to_eigen(const Mat2& m) {
  Eigen::Matrix2d e;
  e << m[0], m[1], m[2], m[3];
  return e;
}

Mat2 from_eigen(const Eigen::Matrix2d& e) { return {e(0, 0), e(0, 1), e(1, 0), e(1, 1)}; }

bool finite(const MomentPair& g) {
  return std::all_of(g.mean.begin(), g.mean.end(), [](double v) { return std::isfinite(v); }) &&
         std::all_of(g.cov.begin(), g.cov.end(), [](double v) { return std::isfinite(v); });
}

// Rows of the Fisher evaluation processed per forward pass.
constexpr std::size_t kFisherChunk = 2048;

}  // namespace

nlohmann::json to_json(const MetricReport& r) {
  return {{"format_version", 1},
          {"metric", r.metric},
          {"value", r.value},
          {"samples_a", r.samples_a},
          {"samples_b", r.samples_b},
          {"config", r.config}};
}

MetricReport latent_fisher_divergence(const ScoreModel& theta, const ScoreModel& theta_prime,
                                      const PointSet& eval_latents,
                                      const std::vector<PromptSpec>& prompts,
                                      const NoiseSchedule& sched, int n_t, std::uint64_t seed) {
  if (n_t < 1) throw ContractError("latent_fisher_divergence: n_t must be >= 1");
  if (eval_latents.empty() || prompts.empty()) {
    throw ContractError("latent_fisher_divergence: need latents and prompts");
  }
  for (const auto& p : prompts) {
    validate(p);
    if (p.has_concept_slots()) {
      throw ContractError("latent_fisher_divergence: prompt '" + p.key() +
                          "' carries a customized concept");
    }
  }

  Rng rng(seed);
  std::vector<Point2> z_t;
  std::vector<int> ts;
  for (const Point2& z0 : eval_latents.points) {
    for (int j = 0; j < n_t; ++j) {
      const int t = static_cast<int>(rng.uniform_int(1, sched.steps()));
      const Point2 eps{rng.normal(), rng.normal()};
      ts.push_back(t);
      z_t.push_back(q_sample(z0, t, eps, sched));
    }
  }

  double total = 0.0;
  std::size_t count = 0;
  for (const auto& prompt : prompts) {
    for (std::size_t begin = 0; begin < z_t.size(); begin += kFisherChunk) {
      const std::size_t end = std::min(z_t.size(), begin + kFisherChunk);
      PointSet chunk{{z_t.begin() + begin, z_t.begin() + end}, {}};
      std::span<const int> tchunk(ts.data() + begin, end - begin);
      const Tensor z = to_matrix(chunk);
      const Tensor a = predict_noise(theta, z, tchunk, prompt);
      const Tensor b = predict_noise(theta_prime, z, tchunk, prompt);
      for (std::size_t i = 0; i < a.rows(); ++i) {
        const double dx = a(i, 0) - b(i, 0), dy = a(i, 1) - b(i, 1);
        total += dx * dx + dy * dy;
      }
      count += a.rows();
    }
  }

  MetricReport r;
  r.metric = "latent_fisher_divergence";
  r.value = 0.5 * total / static_cast<double>(count);
  if (!std::isfinite(r.value)) throw NumericError("latent_fisher_divergence: non-finite value");
  r.samples_a = eval_latents.size();
  r.samples_b = count;
  r.config = {{"seed", seed}, {"n_t", n_t}, {"prompts", prompts.size()}};
  return r;
}

MomentPair gaussian_fit(const PointSet& points) {
  if (points.size() < 2) throw ContractError("gaussian_fit: need at least 2 points");
  const double n = static_cast<double>(points.size());
  MomentPair g;
  for (const auto& p : points.points) {
    g.mean[0] += p[0];
    g.mean[1] += p[1];
  }
  g.mean[0] /= n;
  g.mean[1] /= n;
  double sxx = 0.0, sxy = 0.0, syy = 0.0;
  for (const auto& p : points.points) {
    const double dx = p[0] - g.mean[0], dy = p[1] - g.mean[1];
    sxx += dx * dx;
    sxy += dx * dy;
    syy += dy * dy;
  }
  g.cov = {sxx / (n - 1.0), sxy / (n - 1.0), sxy / (n - 1.0), syy / (n - 1.0)};
  if (!finite(g)) throw NumericError("gaussian_fit: non-finite moments");

  Eigen::SelfAdjointEigenSolver<Eigen::Matrix2d> es(to_eigen(g.cov));
  if (es.eigenvalues().minCoeff() < 0.0) {
    const Eigen::Vector2d clamped = es.eigenvalues().cwiseMax(0.0);
    g.cov = from_eigen(es.eigenvectors() * clamped.asDiagonal() * es.eigenvectors().transpose());
    g.cov[2] = g.cov[1];
  }
  return g;
}

Mat2 sqrtm_psd(const Mat2& m) {
  Eigen::Matrix2d e = to_eigen(m);
  e = 0.5 * (e + e.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix2d> es(e);
  if (es.info() != Eigen::Success) throw NumericError("sqrtm_psd: eigendecomposition failed");
  const Eigen::Vector2d root = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return from_eigen(es.eigenvectors() * root.asDiagonal() * es.eigenvectors().transpose());
}

MetricReport w2_gaussian(const MomentPair& g1, const MomentPair& g2) {
  if (!finite(g1) || !finite(g2)) throw NumericError("w2_gaussian: non-finite moments");
  MetricReport r;
  r.metric = "w2_gaussian";
  const double dx = g1.mean[0] - g2.mean[0], dy = g1.mean[1] - g2.mean[1];
  const double mean_term = dx * dx + dy * dy;
  if (g1.cov == g2.cov) {
    // Identical covariances cancel in the trace term.
    r.value = std::sqrt(mean_term);
    return r;
  }
  const Eigen::Matrix2d s1 = to_eigen(g1.cov);
  const Eigen::Matrix2d s2 = to_eigen(g2.cov);
  const Eigen::Matrix2d root2 = to_eigen(sqrtm_psd(g2.cov));
  const Eigen::Matrix2d cross = to_eigen(sqrtm_psd(from_eigen(root2 * s1 * root2)));
  const double trace_term = (s1 + s2 - 2.0 * cross).trace();
  r.value = std::sqrt(std::max(0.0, mean_term + trace_term));
  return r;
}

std::vector<std::size_t> min_cost_assignment(const std::vector<double>& cost, std::size_t n) {
  if (cost.size() != n * n) throw ShapeError("min_cost_assignment: cost matrix is not n x n");
  // Shortest augmenting path with row/column potentials (1-based internally).
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0), minv(n + 1);
  std::vector<std::size_t> match(n + 1, 0), way(n + 1, 0);
  std::vector<char> used(n + 1);
  for (std::size_t i = 1; i <= n; ++i) {
    match[0] = i;
    std::size_t j0 = 0;
    std::fill(minv.begin(), minv.end(), inf);
    std::fill(used.begin(), used.end(), 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = match[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[match[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (match[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      match[j0] = match[j1];
      j0 = j1;
    } while (j0);
  }
  std::vector<std::size_t> assignment(n);
  for (std::size_t j = 1; j <= n; ++j) assignment[match[j] - 1] = j - 1;
  return assignment;
}

MetricReport w2_empirical_oracle(const PointSet& a, const PointSet& b) {
  if (a.size() != b.size()) throw ContractError("w2_empirical_oracle: point sets differ in size");
  if (a.empty()) throw ContractError("w2_empirical_oracle: empty point sets");
  const std::size_t n = a.size();
  std::vector<double> cost(n * n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const double dx = a.points[i][0] - b.points[j][0], dy = a.points[i][1] - b.points[j][1];
      cost[i * n + j] = dx * dx + dy * dy;
    }
  }
  const auto assignment = min_cost_assignment(cost, n);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) total += cost[i * n + assignment[i]];
  MetricReport r;
  r.metric = "w2_empirical";
  r.value = std::sqrt(total / static_cast<double>(n));
  r.samples_a = r.samples_b = n;
  return r;
}

double mode_coverage(const PointSet& points, const std::vector<Point2>& centers, double radius,
                     std::size_t quorum) {
  if (!(radius > 0.0)) throw ContractError("mode_coverage: radius must be positive");
  if (centers.empty()) throw ContractError("mode_coverage: no centers");
  const double r2 = radius * radius;
  std::size_t covered = 0;
  for (const Point2& c : centers) {
    std::size_t hits = 0;
    for (const Point2& p : points.points) {
      const double dx = p[0] - c[0], dy = p[1] - c[1];
      if (dx * dx + dy * dy <= r2) ++hits;
    }
    if (hits >= quorum) ++covered;
  }
  return static_cast<double>(covered) / static_cast<double>(centers.size());
}

std::vector<CurveSeries> overfitting_curves(const DenoiserWeights& base,
                                            const std::vector<MethodCheckpoints>& methods,
                                            const CurveEvalConfig& config,
                                            const NoiseSchedule& sched) {
  const std::string fingerprint = base.fingerprint();
  const ScoreModel base_model{&base, nullptr, false};

  Rng ref_rng(config.seed);
  const PointSet reference = ddim_sample(base, config.reference_prompt, sched, config.sampler,
                                         config.samples, ref_rng).points;
  const MomentPair reference_fit = gaussian_fit(reference);

  std::vector<CurveSeries> out;
  for (const auto& m : methods) {
    CurveSeries series{m.method, {}};
    for (const auto& ck : m.checkpoints) {
      for (const auto& r : ck.residuals) {
        if (r.base_fingerprint != fingerprint) {
          throw ContractError("overfitting_curves: checkpoint of '" + m.method +
                              "' does not belong to this base model");
        }
      }
      if (!series.points.empty() && ck.step <= series.points.back().step) {
        throw ContractError("overfitting_curves: checkpoint steps must increase");
      }
      const ScoreModel model{&ck.weights, ck.residuals.empty() ? nullptr : &ck.residuals,
                             ck.dual_stream};
      CurvePoint pt;
      pt.step = ck.step;
      pt.fisher = latent_fisher_divergence(base_model, model, config.fisher_latents,
                                           config.fisher_prompts, sched, config.n_t, config.seed)
                      .value;
      Rng rng(config.seed);
      const PointSet samples =
          ddim_sample(ck.weights, m.prompt, sched, config.sampler, config.samples, rng,
                      model.residuals, ck.dual_stream)
              .points;
      pt.w2 = w2_gaussian(gaussian_fit(samples), reference_fit).value;
      pt.coverage = mode_coverage(samples, config.centers, config.radius, config.quorum);
      series.points.push_back(pt);
    }
    out.push_back(std::move(series));
  }
  return out;
}

std::string curves_to_csv(const std::vector<CurveSeries>& curves) {
  std::string out = "method,step,fisher,w2,coverage\n";
  char buf[256];
  for (const auto& s : curves) {
    for (const auto& p : s.points) {
      std::snprintf(buf, sizeof buf, "%s,%zu,%.12g,%.12g,%.6g\n", s.method.c_str(), p.step, p.fisher,
                    p.w2, p.coverage);
      out += buf;
    }
  }
  return out;
}

}  // namespace infusion
