#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "infusion/denoiser.hpp"
#include "infusion/optimizer.hpp"
#include "infusion/worlds.hpp"

namespace infusion {

// Linear-beta variance schedule. Index t runs 1..T; alpha_bar(0) is 1.
class NoiseSchedule {
 public:
  NoiseSchedule() = default;
  NoiseSchedule(std::vector<double> beta, std::vector<double> alpha_bar)
      : beta_(std::move(beta)), alpha_bar_(std::move(alpha_bar)) {}

  int steps() const { return static_cast<int>(beta_.size()); }
  double beta(int t) const { return beta_.at(static_cast<std::size_t>(t - 1)); }
  double alpha_bar(int t) const { return t == 0 ? 1.0 : alpha_bar_.at(static_cast<std::size_t>(t - 1)); }
  const std::vector<double>& betas() const { return beta_; }
  const std::vector<double>& alpha_bars() const { return alpha_bar_; }

 private:
  std::vector<double> beta_;
  std::vector<double> alpha_bar_;
};

NoiseSchedule make_schedule(int t_train = 1000, double beta_start = 1e-4, double beta_end = 0.02);

struct SamplerConfig {
  int steps = 50;
  double guidance = 2.0;
  double eta = 0.0;
};

void validate(const SamplerConfig& sampler, const NoiseSchedule& sched);

Point2 q_sample(const Point2& z0, int t, const Point2& eps, const NoiseSchedule& sched);

// Noise prediction recorded on a tape for a batch of noisy points.
using NoisePredictor =
    std::function<Var(Tape&, const Tensor& z_t, std::span<const int> t, const PromptSpec& prompt)>;

// Mean over the batch of ||eps - eps_hat(z_t, t, y)||^2 with t ~ U{1..T},
// eps ~ N(0, I) and the condition dropped with probability p_uncond.
Var diffusion_loss(Tape& tape, const PointSet& batch, const PromptSpec& prompt,
                   const NoiseSchedule& sched, double p_uncond, Rng& rng,
                   const NoisePredictor& predictor);

// Same objective evaluated with fixed denoiser weights.
double diffusion_loss(const PointSet& batch, const PromptSpec& prompt,
                      const DenoiserWeights& weights, const NoiseSchedule& sched, double p_uncond,
                      Rng& rng);

// "photo-of <token>" without concept slots.
PromptSpec concept_prompt(const std::string& concept_token);

struct TrainConfig {
  DenoiserConfig denoiser;
  std::size_t steps = 8000;
  std::size_t batch = 32;
  double lr = 2e-3;
  // Cosine decay from lr to lr * lr_floor over the run; 1 keeps lr constant.
  double lr_floor = 1.0;
  double p_uncond = 0.1;
  std::uint64_t seed = 0;
  std::size_t checkpoint_every = 0;  // 0 disables intermediate checkpoints
};

struct BaseTrainResult {
  DenoiserWeights weights;
  std::vector<double> losses;
  std::vector<std::pair<std::size_t, DenoiserWeights>> checkpoints;
};

BaseTrainResult train_base(const ConceptWorld& world, const TrainConfig& config,
                           const NoiseSchedule& sched);

// Noise prediction with classifier-free guidance:
//   eps_null + s * (eps_cond - eps_null).
Tensor guide(const Tensor& eps_null, const Tensor& eps_cond, double scale);

struct SampleOptions {
  bool record_traces = false;
  bool record_guided_eps = false;
  const InjectionMask* mask = nullptr;
};

struct SampleOutput {
  PointSet points;
  // Conditional-branch trace per step (the F-pipeline's in dual-stream mode).
  std::vector<AttentionTrace> trace_log;
  // Guided noise driving the update per step (the C-pipeline's in dual-stream mode).
  std::vector<Tensor> guided_eps_log;
};

// DDIM from z_T ~ N(0, I). In dual-stream mode the foundational pipeline runs
// its own trajectory from the same z_T; each step its conditional attention
// maps replace those of the customized pipeline, which also applies residuals.
SampleOutput ddim_sample(const DenoiserWeights& weights, const PromptSpec& prompt,
                         const NoiseSchedule& sched, const SamplerConfig& sampler, std::size_t n,
                         Rng& rng, const ResidualSet* residuals = nullptr, bool dual_stream = false,
                         const SampleOptions& options = {});

// A denoiser as seen by evaluation code: frozen weights, optionally with
// residual value embeddings applied through the dual-stream pipeline.
struct ScoreModel {
  const DenoiserWeights* weights = nullptr;
  const ResidualSet* residuals = nullptr;
  bool dual_stream = false;
};

// Unguided noise prediction. With dual_stream, the foundational pass runs
// first and its maps are injected into the residual-carrying pass.
Tensor predict_noise(const ScoreModel& model, const Tensor& z, std::span<const int> t,
                     const PromptSpec& prompt);

// DDIM timestep subsequence, ascending, last element T.
std::vector<int> ddim_timesteps(int t_train, int steps);

Tensor to_matrix(const PointSet& points);
PointSet to_points(const Tensor& m, std::string label = {});

}  // namespace infusion
