#include "infusion/diffusion.hpp"

#include <cmath>
#include <numbers>

#include "infusion/errors.hpp"

namespace infusion {

NoiseSchedule make_schedule(int t_train, double beta_start, double beta_end) {
  if (t_train < 1) throw ContractError("make_schedule: T_train must be >= 1");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
    throw ContractError("make_schedule: need 0 < beta_start <= beta_end < 1");
  }
  std::vector<double> beta(static_cast<std::size_t>(t_train));
  std::vector<double> alpha_bar(beta.size());
  double prod = 1.0;
  for (int i = 0; i < t_train; ++i) {
    const double frac = t_train == 1 ? 0.0 : static_cast<double>(i) / (t_train - 1);
    beta[i] = beta_start + frac * (beta_end - beta_start);
    prod *= 1.0 - beta[i];
    alpha_bar[i] = prod;
  }
  return NoiseSchedule(std::move(beta), std::move(alpha_bar));
}

void validate(const SamplerConfig& sampler, const NoiseSchedule& sched) {
  if (sampler.steps < 1 || sampler.steps > sched.steps()) {
    throw ContractError("sampler steps must lie in [1, T_train]");
  }
  if (!(sampler.guidance >= 0.0)) throw ContractError("guidance scale must be >= 0");
  if (!(sampler.eta >= 0.0 && sampler.eta <= 1.0)) throw ContractError("eta must lie in [0,1]");
}

Point2 q_sample(const Point2& z0, int t, const Point2& eps, const NoiseSchedule& sched) {
  if (t < 1 || t > sched.steps()) {
    throw ContractError("q_sample: t=" + std::to_string(t) + " outside [1, " +
                        std::to_string(sched.steps()) + "]");
  }
  const double a = std::sqrt(sched.alpha_bar(t));
  const double s = std::sqrt(1.0 - sched.alpha_bar(t));
  return {a * z0[0] + s * eps[0], a * z0[1] + s * eps[1]};
}

PromptSpec concept_prompt(const std::string& concept_token) {
  return PromptSpec::of({kPhotoOfToken, concept_token});
}

Tensor to_matrix(const PointSet& points) {
  Tensor m = Tensor::zeros(points.size(), 2);
  for (std::size_t i = 0; i < points.size(); ++i) {
    m(i, 0) = points.points[i][0];
    m(i, 1) = points.points[i][1];
  }
  return m;
}

PointSet to_points(const Tensor& m, std::string label) {
  PointSet out;
  out.label = std::move(label);
  out.points.reserve(m.rows());
  for (std::size_t i = 0; i < m.rows(); ++i) out.points.push_back({m(i, 0), m(i, 1)});
  return out;
}

Var diffusion_loss(Tape& tape, const PointSet& batch, const PromptSpec& prompt,
                   const NoiseSchedule& sched, double p_uncond, Rng& rng,
                   const NoisePredictor& predictor) {
  if (batch.empty()) throw ContractError("diffusion_loss: empty batch");
  const std::size_t n = batch.size();

  struct Group {
    PromptSpec prompt;
    std::vector<Point2> z_t;
    std::vector<Point2> eps;
    std::vector<int> t;
  };
  Group kept{prompt, {}, {}, {}};
  Group dropped{PromptSpec::null(prompt.length()), {}, {}, {}};

  for (const Point2& z0 : batch.points) {
    const int t = static_cast<int>(rng.uniform_int(1, sched.steps()));
    const Point2 eps{rng.normal(), rng.normal()};
    const bool is_dropped = drop_condition(prompt, p_uncond, rng).is_null && !prompt.is_null;
    Group& g = is_dropped ? dropped : kept;
    g.z_t.push_back(q_sample(z0, t, eps, sched));
    g.eps.push_back(eps);
    g.t.push_back(t);
  }

  std::optional<Var> total;
  for (Group* g : {&kept, &dropped}) {
    if (g->t.empty()) continue;
    Tensor z = to_matrix(PointSet{g->z_t, {}});
    Var eps_hat = predictor(tape, z, g->t, g->prompt);
    Var target = tape.constant(to_matrix(PointSet{g->eps, {}}));
    Var sq = sum_squares(sub(target, eps_hat));
    total = total ? add(*total, sq) : sq;
  }
  return scale(*total, 1.0 / static_cast<double>(n));
}

double diffusion_loss(const PointSet& batch, const PromptSpec& prompt,
                      const DenoiserWeights& weights, const NoiseSchedule& sched, double p_uncond,
                      Rng& rng) {
  Tape tape;
  const DenoiserVars net = bind_constants(tape, weights);
  auto predictor = [&](Tape& tp, const Tensor& z, std::span<const int> t, const PromptSpec& p) {
    ForwardRequest req{tp.constant(z), t, tp.constant(encode_prompt(p, weights.tokens)), {}, nullptr,
                       nullptr, p.key()};
    return denoise_forward(tp, net, weights.config, req).eps;
  };
  return diffusion_loss(tape, batch, prompt, sched, p_uncond, rng, predictor).value().item();
}

BaseTrainResult train_base(const ConceptWorld& world, const TrainConfig& config,
                           const NoiseSchedule& sched) {
  validate(world);
  if (config.batch == 0) throw ContractError("train_base: batch size must be >= 1");
  if (!(config.lr_floor >= 0.0 && config.lr_floor <= 1.0)) throw ContractError("train_base: lr_floor must lie in [0,1]");
  BaseTrainResult result{init_denoiser(config.denoiser, config.seed), {}, {}};
  DenoiserWeights& w = result.weights;
  NamedTensors params = w.network_parameters();
  OptimizerState opt;
  AdamConfig adam{config.lr};
  Rng rng(config.seed ^ 0x5bd1e995ULL);
  const auto tokens = world.tokens();
  const long last = static_cast<long>(tokens.size()) - 1;

  for (std::size_t step = 1; step <= config.steps; ++step) {
    const std::string& concept_token = tokens[static_cast<std::size_t>(rng.uniform_int(0, last))];
    const PointSet batch = sample_concept(world, concept_token, config.batch, rng);
    Tape tape;
    const DenoiserVars net = bind_parameters(tape, w);
    auto predictor = [&](Tape& tp, const Tensor& z, std::span<const int> t, const PromptSpec& p) {
      ForwardRequest req{tp.constant(z), t, tp.constant(encode_prompt(p, w.tokens)), {}, nullptr,
                         nullptr, p.key()};
      return denoise_forward(tp, net, w.config, req).eps;
    };
    Var loss = diffusion_loss(tape, batch, concept_prompt(concept_token), sched, config.p_uncond,
                              rng, predictor);
    const double value = loss.value().item();
    if (!std::isfinite(value)) throw TrainingError("train_base: non-finite loss", static_cast<long>(step));
    result.losses.push_back(value);
    const double progress = static_cast<double>(step - 1) / static_cast<double>(config.steps);
    const double decay = 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
    adam.lr = config.lr * (config.lr_floor + (1.0 - config.lr_floor) * decay);
    adam_step(params, tape.backward(loss), opt, adam);
    w.assign_network_parameters(params);
    if (config.checkpoint_every && step % config.checkpoint_every == 0) {
      result.checkpoints.emplace_back(step, w);
    }
  }
  return result;
}

Tensor predict_noise(const ScoreModel& model, const Tensor& z, std::span<const int> t,
                     const PromptSpec& prompt) {
  if (!model.weights) throw ContractError("predict_noise: model has no weights");
  if (!model.dual_stream) return denoise_forward(*model.weights, z, t, prompt, model.residuals).eps;
  const DenoiseResult f = denoise_forward(*model.weights, z, t, prompt);
  return denoise_forward(*model.weights, z, t, prompt, model.residuals, &f.trace).eps;
}

Tensor guide(const Tensor& eps_null, const Tensor& eps_cond, double scale) {
  if (!eps_null.same_shape(eps_cond)) throw ShapeError("guide: shape mismatch");
  Tensor out = eps_null;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = eps_null[i] + scale * (eps_cond[i] - eps_null[i]);
  return out;
}

std::vector<int> ddim_timesteps(int t_train, int steps) {
  std::vector<int> ts;
  ts.reserve(static_cast<std::size_t>(steps));
  for (int j = 0; j < steps; ++j) {
    ts.push_back(static_cast<int>((static_cast<long>(j) + 1) * t_train / steps));
  }
  return ts;
}

namespace {

struct GuidedStep {
  Tensor eps;
  AttentionTrace cond_trace;
};

// One guided noise prediction for a batch at a shared timestep.
GuidedStep guided_prediction(const DenoiserWeights& weights, const Tensor& z,
                             std::span<const int> t, const PromptSpec& prompt, double scale,
                             const ResidualSet* residuals, const AttentionTrace* injected,
                             const InjectionMask* mask) {
  const PromptSpec null_prompt = PromptSpec::null(prompt.length());
  DenoiseResult uncond = denoise_forward(weights, z, t, null_prompt);
  if (prompt.is_null) {
    return GuidedStep{guide(uncond.eps, uncond.eps, scale), std::move(uncond.trace)};
  }
  DenoiseResult cond = denoise_forward(weights, z, t, prompt, residuals, injected, mask);
  return GuidedStep{guide(uncond.eps, cond.eps, scale), std::move(cond.trace)};
}

void ddim_update(Tensor& z, const Tensor& eps, double ab_t, double ab_prev, double sigma,
                 const std::vector<double>& noise) {
  const double sa = std::sqrt(ab_t), s1 = std::sqrt(1.0 - ab_t);
  const double dir = std::sqrt(std::max(0.0, 1.0 - ab_prev - sigma * sigma));
  const double sp = std::sqrt(ab_prev);
  for (std::size_t i = 0; i < z.size(); ++i) {
    const double x0 = (z[i] - s1 * eps[i]) / sa;
    z[i] = sp * x0 + dir * eps[i] + (sigma > 0.0 ? sigma * noise[i] : 0.0);
  }
}

}  // namespace

SampleOutput ddim_sample(const DenoiserWeights& weights, const PromptSpec& prompt,
                         const NoiseSchedule& sched, const SamplerConfig& sampler, std::size_t n,
                         Rng& rng, const ResidualSet* residuals, bool dual_stream,
                         const SampleOptions& options) {
  validate(sampler, sched);
  validate(prompt);
  if (n == 0) throw ContractError("ddim_sample: n must be >= 1");
  if (dual_stream && !residuals) throw ContractError("ddim_sample: dual_stream requires residuals");

  Tensor z_f = Tensor::zeros(n, 2);
  for (double& v : z_f.values()) v = rng.normal();
  Tensor z_c = z_f;  // customized trajectory, used in dual-stream mode only

  const std::vector<int> ts = ddim_timesteps(sched.steps(), sampler.steps);
  SampleOutput out;
  std::vector<double> noise(n * 2);
  for (std::size_t j = ts.size(); j-- > 0;) {
    const int t = ts[j];
    const std::vector<int> tvec(n, t);
    const double ab_t = sched.alpha_bar(t);
    const double ab_prev = j > 0 ? sched.alpha_bar(ts[j - 1]) : 1.0;
    const double sigma = sampler.eta *
                         std::sqrt((1.0 - ab_prev) / (1.0 - ab_t)) * std::sqrt(1.0 - ab_t / ab_prev);
    if (sigma > 0.0)
      for (double& v : noise) v = rng.normal();

    if (!dual_stream) {
      GuidedStep g = guided_prediction(weights, z_f, tvec, prompt, sampler.guidance, residuals,
                                       nullptr, nullptr);
      if (options.record_traces) out.trace_log.push_back(g.cond_trace);
      if (options.record_guided_eps) out.guided_eps_log.push_back(g.eps);
      ddim_update(z_f, g.eps, ab_t, ab_prev, sigma, noise);
      continue;
    }

    GuidedStep f = guided_prediction(weights, z_f, tvec, prompt, sampler.guidance, nullptr,
                                     nullptr, nullptr);
    GuidedStep c = guided_prediction(weights, z_c, tvec, prompt, sampler.guidance, residuals,
                                     prompt.is_null ? nullptr : &f.cond_trace, options.mask);
    if (options.record_traces) out.trace_log.push_back(f.cond_trace);
    if (options.record_guided_eps) out.guided_eps_log.push_back(c.eps);
    ddim_update(z_f, f.eps, ab_t, ab_prev, sigma, noise);
    ddim_update(z_c, c.eps, ab_t, ab_prev, sigma, noise);
  }
  out.points = to_points(dual_stream ? z_c : z_f, prompt.key());
  return out;
}

}  // namespace infusion
