#include "infusion/customization.hpp"

#include <algorithm>
#include <cmath>

#include "infusion/errors.hpp"

namespace infusion {

std::string to_string(Method m) {
  switch (m) {
    case Method::infusion: return "infusion";
    case Method::full_finetune: return "full-finetune";
    case Method::token_inversion: return "token-inversion";
  }
  return "unknown";
}

Method parse_method(const std::string& name) {
  if (name == "infusion") return Method::infusion;
  if (name == "full-finetune") return Method::full_finetune;
  if (name == "token-inversion") return Method::token_inversion;
  throw ContractError("unknown method '" + name + "'");
}

PromptSpec customization_prompt(std::vector<std::string> tokens, std::size_t position,
                                std::string concept_token) {
  return PromptSpec::of(std::move(tokens), {ConceptSlot{position, std::move(concept_token)}});
}

Tensor apply_residuals(const Tensor& v, const PromptSpec& prompt, const ResidualSet& residuals,
                       std::size_t layer) {
  validate(prompt);
  if (v.rank() != 2 || v.rows() != prompt.length()) {
    throw ShapeError("apply_residuals: value matrix " + shape_string(v.shape()) +
                     " for prompt of length " + std::to_string(prompt.length()));
  }
  Tensor out = v;
  for (const auto& slot : prompt.concept_slots) {
    auto it = std::find_if(residuals.begin(), residuals.end(),
                           [&](const auto& r) { return r.concept_token == slot.concept_token; });
    if (it == residuals.end()) continue;
    if (layer >= it->deltas.size()) throw ShapeError("apply_residuals: layer out of range");
    const auto& delta = it->deltas[layer];
    if (delta.size() != v.cols()) {
      throw ShapeError("apply_residuals: residual width " + std::to_string(delta.size()) +
                       " != " + std::to_string(v.cols()));
    }
    auto row = out.row_span(slot.position);
    for (std::size_t j = 0; j < row.size(); ++j) row[j] += delta[j];
  }
  return out;
}

namespace {

void require_single_slot(const PromptSpec& prompt, const char* who) {
  validate(prompt);
  if (prompt.concept_slots.size() != 1) {
    throw ContractError(std::string(who) + ": prompt must carry exactly one concept slot");
  }
}

PointSet draw_batch(const PointSet& data, std::size_t batch, Rng& rng) {
  PointSet out;
  out.points.reserve(batch);
  const long last = static_cast<long>(data.size()) - 1;
  for (std::size_t i = 0; i < batch; ++i) {
    out.points.push_back(data.points[static_cast<std::size_t>(rng.uniform_int(0, last))]);
  }
  return out;
}

bool is_checkpoint(std::size_t step, std::size_t steps, std::size_t every) {
  return step == steps || (every && step % every == 0);
}

void check_loss(double value, std::size_t step, const char* who) {
  if (!std::isfinite(value)) throw TrainingError(std::string(who) + ": non-finite loss", static_cast<long>(step));
}

void check_inputs(const PointSet& data, const CustomizeConfig& config, const char* who) {
  if (data.empty()) throw ContractError(std::string(who) + ": empty training data");
  if (config.batch == 0) throw ContractError(std::string(who) + ": batch must be >= 1");
}

}  // namespace

CustomizationRun<ResidualConceptEmbedding> train_infusion(const DenoiserWeights& base,
                                                          const PointSet& data,
                                                          const PromptSpec& prompt,
                                                          std::size_t steps,
                                                          const CustomizeConfig& config,
                                                          const NoiseSchedule& sched) {
  require_single_slot(prompt, "train_infusion");
  check_inputs(data, config, "train_infusion");
  const DenoiserConfig& dc = base.config;
  const std::string concept_token = prompt.concept_slots.front().concept_token;
  const std::size_t position = prompt.concept_slots.front().position;

  CustomizationRun<ResidualConceptEmbedding> run;
  run.result = ResidualConceptEmbedding::zeros(concept_token, dc.layers, dc.d_model, base.fingerprint());
  run.checkpoints.emplace_back(0, run.result);

  NamedTensors params;
  for (std::size_t i = 0; i < dc.layers; ++i) params["delta." + std::to_string(i)] = Tensor::zeros(1, dc.d_model);
  OptimizerState opt;
  const AdamConfig adam{config.lr};
  Rng rng(config.seed);

  for (std::size_t step = 1; step <= steps; ++step) {
    const PointSet batch = draw_batch(data, config.batch, rng);
    Tape tape;
    const DenoiserVars net = bind_constants(tape, base);
    SlotResidual slot{position, {}};
    for (std::size_t i = 0; i < dc.layers; ++i) {
      const std::string name = "delta." + std::to_string(i);
      slot.deltas.push_back(tape.parameter(name, params.at(name)));
    }
    auto predictor = [&](Tape& tp, const Tensor& z, std::span<const int> t, const PromptSpec& p) {
      // Foundational pass: frozen weights, no residuals, maps captured.
      const DenoiseResult f = denoise_forward(base, z, t, p);
      const bool customized = !p.is_null;
      std::span<const SlotResidual> slots = customized ? std::span<const SlotResidual>(&slot, 1)
                                                       : std::span<const SlotResidual>();
      ForwardRequest req{tp.constant(z), t, tp.constant(encode_prompt(p, base.tokens)), slots,
                         &f.trace, nullptr, p.key()};
      return denoise_forward(tp, net, dc, req).eps;
    };
    Var loss = diffusion_loss(tape, batch, prompt, sched, config.p_uncond, rng, predictor);
    check_loss(loss.value().item(), step, "train_infusion");
    run.losses.push_back(loss.value().item());
    adam_step(params, tape.backward(loss), opt, adam);

    if (is_checkpoint(step, steps, config.checkpoint_every)) {
      for (std::size_t i = 0; i < dc.layers; ++i) {
        run.result.deltas[i] = params.at("delta." + std::to_string(i)).values();
      }
      run.result.steps = step;
      run.checkpoints.emplace_back(step, run.result);
    }
  }
  return run;
}

CustomizationRun<DenoiserWeights> train_full_finetune(const DenoiserWeights& base,
                                                      const PointSet& data,
                                                      const PromptSpec& prompt, std::size_t steps,
                                                      const CustomizeConfig& config,
                                                      const NoiseSchedule& sched) {
  require_single_slot(prompt, "train_full_finetune");
  check_inputs(data, config, "train_full_finetune");
  CustomizationRun<DenoiserWeights> run;
  run.result = base;
  run.checkpoints.emplace_back(0, base);
  DenoiserWeights& w = run.result;
  NamedTensors params = w.network_parameters();
  OptimizerState opt;
  const AdamConfig adam{config.finetune_lr};
  Rng rng(config.seed);

  for (std::size_t step = 1; step <= steps; ++step) {
    const PointSet batch = draw_batch(data, config.batch, rng);
    Tape tape;
    const DenoiserVars net = bind_parameters(tape, w);
    auto predictor = [&](Tape& tp, const Tensor& z, std::span<const int> t, const PromptSpec& p) {
      ForwardRequest req{tp.constant(z), t, tp.constant(encode_prompt(p, w.tokens)), {}, nullptr,
                         nullptr, p.key()};
      return denoise_forward(tp, net, w.config, req).eps;
    };
    Var loss = diffusion_loss(tape, batch, prompt, sched, config.p_uncond, rng, predictor);
    check_loss(loss.value().item(), step, "train_full_finetune");
    run.losses.push_back(loss.value().item());
    adam_step(params, tape.backward(loss), opt, adam);
    w.assign_network_parameters(params);
    if (is_checkpoint(step, steps, config.checkpoint_every)) run.checkpoints.emplace_back(step, w);
  }
  return run;
}

DenoiserWeights with_token_embedding(const DenoiserWeights& base, const std::string& placeholder,
                                     const std::vector<double>& embedding) {
  if (embedding.size() != base.tokens.dim) throw ShapeError("token embedding width mismatch");
  DenoiserWeights w = base;
  w.tokens.entries[placeholder] = embedding;
  return w;
}

CustomizationRun<std::vector<double>> train_token_inversion(const DenoiserWeights& base,
                                                            const PointSet& data,
                                                            const std::string& placeholder,
                                                            const PromptSpec& prompt,
                                                            std::size_t steps,
                                                            const CustomizeConfig& config,
                                                            const NoiseSchedule& sched) {
  require_single_slot(prompt, "train_token_inversion");
  check_inputs(data, config, "train_token_inversion");
  if (!is_placeholder_token(placeholder)) {
    throw ContractError("train_token_inversion: '" + placeholder + "' belongs to the frozen vocabulary");
  }
  if (std::find(prompt.tokens.begin(), prompt.tokens.end(), placeholder) == prompt.tokens.end()) {
    throw ContractError("train_token_inversion: prompt does not contain the placeholder");
  }
  if (config.init_token.empty()) throw ContractError("train_token_inversion: init_token not set");

  CustomizationRun<std::vector<double>> run;
  run.result = base.tokens.at(config.init_token);
  run.checkpoints.emplace_back(0, run.result);
  const std::string param_name = "token." + placeholder;
  NamedTensors params{{param_name, Tensor::row(run.result)}};
  OptimizerState opt;
  const AdamConfig adam{config.lr};
  Rng rng(config.seed);

  for (std::size_t step = 1; step <= steps; ++step) {
    const PointSet batch = draw_batch(data, config.batch, rng);
    Tape tape;
    const DenoiserVars net = bind_constants(tape, base);
    Var learned = tape.parameter(param_name, params.at(param_name));
    auto predictor = [&](Tape& tp, const Tensor& z, std::span<const int> t, const PromptSpec& p) {
      std::vector<Var> rows;
      for (std::size_t k = 0; k < p.length(); ++k) {
        if (!p.is_null && p.tokens[k] == placeholder) rows.push_back(learned);
        else rows.push_back(tp.constant(Tensor::row(base.tokens.at(p.is_null ? kNullToken : p.tokens[k]))));
      }
      ForwardRequest req{tp.constant(z), t, stack_rows(rows), {}, nullptr, nullptr, p.key()};
      return denoise_forward(tp, net, base.config, req).eps;
    };
    Var loss = diffusion_loss(tape, batch, prompt, sched, config.p_uncond, rng, predictor);
    check_loss(loss.value().item(), step, "train_token_inversion");
    run.losses.push_back(loss.value().item());
    adam_step(params, tape.backward(loss), opt, adam);
    if (is_checkpoint(step, steps, config.checkpoint_every)) {
      run.result = params.at(param_name).values();
      run.checkpoints.emplace_back(step, run.result);
    }
  }
  return run;
}

double customization_loss(const ScoreModel& model, const PointSet& data, const PromptSpec& prompt,
                          const NoiseSchedule& sched, std::uint64_t seed) {
  if (data.empty()) throw ContractError("customization_loss: empty data");
  Rng rng(seed);
  std::vector<int> ts;
  std::vector<Point2> z_t, eps;
  for (const Point2& z0 : data.points) {
    const int t = static_cast<int>(rng.uniform_int(1, sched.steps()));
    const Point2 e{rng.normal(), rng.normal()};
    ts.push_back(t);
    eps.push_back(e);
    z_t.push_back(q_sample(z0, t, e, sched));
  }
  const Tensor pred = predict_noise(model, to_matrix(PointSet{z_t, {}}), ts, prompt);
  double total = 0.0;
  for (std::size_t i = 0; i < eps.size(); ++i) {
    const double dx = eps[i][0] - pred(i, 0), dy = eps[i][1] - pred(i, 1);
    total += dx * dx + dy * dy;
  }
  return total / static_cast<double>(eps.size());
}

nlohmann::json residual_to_json(const ResidualConceptEmbedding& r) {
  return {{"format_version", kResidualFormatVersion},
          {"kind", "residual"},
          {"concept", r.concept_token},
          {"d", r.dim()},
          {"layer_count", r.deltas.size()},
          {"deltas", r.deltas},
          {"base_fingerprint", r.base_fingerprint},
          {"steps", r.steps}};
}

ResidualConceptEmbedding residual_from_json(const nlohmann::json& doc) {
  if (doc.value("format_version", 0) != kResidualFormatVersion) {
    throw MigrationError("unsupported residual format_version " +
                         std::to_string(doc.value("format_version", 0)));
  }
  try {
    ResidualConceptEmbedding r;
    r.concept_token = doc.at("concept").get<std::string>();
    r.deltas = doc.at("deltas").get<std::vector<std::vector<double>>>();
    r.base_fingerprint = doc.at("base_fingerprint").get<std::string>();
    r.steps = doc.at("steps").get<std::uint64_t>();
    const auto d = doc.at("d").get<std::size_t>();
    const auto layers = doc.at("layer_count").get<std::size_t>();
    if (r.deltas.size() != layers ||
        std::any_of(r.deltas.begin(), r.deltas.end(), [&](const auto& v) { return v.size() != d; })) {
      throw IntegrityError("residual deltas do not match declared d/layer_count");
    }
    for (const auto& v : r.deltas)
      for (double x : v)
        if (!std::isfinite(x)) throw IntegrityError("residual contains non-finite values");
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw IntegrityError(std::string("malformed residual document: ") + e.what());
  }
}

void check_compatible(const ResidualConceptEmbedding& r, const DenoiserWeights& base) {
  if (r.base_fingerprint != base.fingerprint()) {
    throw ContractError("residual '" + r.concept_token +
                        "' was trained against different base weights (fingerprint mismatch)");
  }
  if (r.deltas.size() != base.config.layers || r.dim() != base.config.d_model) {
    throw ShapeError("residual '" + r.concept_token + "' does not match the denoiser dimensions");
  }
}

}  // namespace infusion
