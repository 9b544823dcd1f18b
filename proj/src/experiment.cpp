#include "infusion/experiment.hpp"

#include <algorithm>
#include <cstdio>
#include <initializer_list>
#include <set>

#include "infusion/checkpoint.hpp"
#include "infusion/errors.hpp"
#include "infusion/hashing.hpp"

namespace infusion {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kPlaceholder = "<obj1>";

void require_keys(const json& obj, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!obj.is_object()) throw ContractError(where + ": expected an object");
  std::set<std::string> ok(allowed.begin(), allowed.end());
  for (const auto& [k, v] : obj.items()) {
    if (!ok.count(k)) throw ContractError(where + ": unknown key '" + k + "'");
  }
}

template <typename T>
void read_opt(const json& obj, const char* key, T& out) {
  if (obj.contains(key)) out = obj.at(key).get<T>();
}

json target_to_json(const LinearTarget& t) {
  return {{"anchor_a", t.anchor_a}, {"anchor_b", t.anchor_b}, {"jitter", t.jitter}, {"carriers", t.carriers}};
}

LinearTarget target_from_json(const json& j) {
  require_keys(j, {"anchor_a", "anchor_b", "jitter", "carriers"}, "target");
  LinearTarget t;
  read_opt(j, "anchor_a", t.anchor_a);
  read_opt(j, "anchor_b", t.anchor_b);
  read_opt(j, "jitter", t.jitter);
  read_opt(j, "carriers", t.carriers);
  return t;
}

std::string step_file(std::size_t step) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "step_%06zu.json", step);
  return buf;
}

}  // namespace

Preset find_preset(const std::string& name) {
  if (name == "toy") return Preset{"toy", 0.01, 32, 50, 2.0, 32};
  if (name == "paper-sd15") return Preset{"paper-sd15", 0.01, 4, 50, 8.0, 768};
  throw ContractError("unknown preset '" + name + "' (expected toy or paper-sd15)");
}

std::uint64_t stage_seed(std::uint64_t master, SeedStage stage) {
  return master * 0x9E3779B97F4A7C15ull + static_cast<std::uint64_t>(stage);
}

void ExperimentConfig::apply_preset(const Preset& p) {
  preset = p.name;
  customize.lr = p.lr;
  customize.batch = p.batch;
  sampler.steps = p.sampler_steps;
  sampler.guidance = p.guidance;
}

json ExperimentConfig::to_json() const {
  const Preset p = find_preset(preset);
  json methods_j = json::array();
  for (Method m : methods) methods_j.push_back(infusion::to_string(m));
  json j = {
      {"format_version", kConfigFormatVersion},
      {"preset", preset},
      {"preset_d_model", p.d_model},
      {"world", world_file.empty() ? json(world) : json{{"file", world_file}}},
      {"customized_concept", customized_concept},
      {"methods", methods_j},
      {"base",
       {{"steps", base.steps},
        {"batch", base.batch},
        {"lr", base.lr},
        {"lr_floor", base.lr_floor},
        {"p_uncond", base.p_uncond},
        {"denoiser",
         {{"query_slots", base.denoiser.query_slots},
          {"d_model", base.denoiser.d_model},
          {"layers", base.denoiser.layers},
          {"time_dim", base.denoiser.time_dim},
          {"ffn_hidden", base.denoiser.ffn_hidden}}}}},
      {"customize",
       {{"steps", customize_steps},
        {"batch", customize.batch},
        {"lr", customize.lr},
        {"finetune_lr", customize.finetune_lr},
        {"p_uncond", customize.p_uncond},
        {"checkpoint_every", customize.checkpoint_every},
        {"data_size", data_size}}},
      {"curve_steps", curve_steps},
      {"sampler", {{"steps", sampler.steps}, {"guidance", sampler.guidance}, {"eta", sampler.eta}}},
      {"metrics",
       {{"samples", eval_samples},
        {"fisher_latents", fisher_latents},
        {"n_t", n_t},
        {"radius", coverage_radius},
        {"quorum", coverage_quorum}}},
      {"seed", seed},
      {"out", out_dir}};
  j["target"] = target ? target_to_json(*target) : json(nullptr);
  return j;
}

ExperimentConfig ExperimentConfig::from_json(const json& doc, const fs::path& base_dir) {
  try {
    require_keys(doc,
                 {"format_version", "preset", "preset_d_model", "world", "customized_concept", "target",
                  "methods", "base", "customize", "curve_steps", "sampler", "metrics", "seed", "out"},
                 "config");
    if (doc.value("format_version", 0) != kConfigFormatVersion) {
      throw MigrationError("unsupported config format_version " + doc.value("format_version", json(0)).dump());
    }
    if (!doc.contains("seed")) throw ContractError("config: 'seed' is required");

    ExperimentConfig c;
    if (doc.contains("preset")) c.apply_preset(find_preset(doc.at("preset").get<std::string>()));

    if (doc.contains("world")) {
      const json& w = doc.at("world");
      if (w.is_string()) {
        c.world = w.get<std::string>();
      } else {
        require_keys(w, {"file"}, "world");
        fs::path f = w.at("file").get<std::string>();
        if (f.is_relative() && !base_dir.empty()) f = base_dir / f;
        if (!fs::exists(f)) throw ContractError("world file '" + f.string() + "' does not exist");
        c.world_file = f.string();
      }
    }
    read_opt(doc, "customized_concept", c.customized_concept);
    if (doc.contains("target") && !doc.at("target").is_null()) c.target = target_from_json(doc.at("target"));
    if (doc.contains("methods")) {
      c.methods.clear();
      for (const auto& m : doc.at("methods")) c.methods.push_back(parse_method(m.get<std::string>()));
      if (c.methods.empty()) throw ContractError("config: 'methods' is empty");
    }
    if (doc.contains("base")) {
      const json& b = doc.at("base");
      require_keys(b, {"steps", "batch", "lr", "lr_floor", "p_uncond", "denoiser"}, "base");
      read_opt(b, "steps", c.base.steps);
      read_opt(b, "batch", c.base.batch);
      read_opt(b, "lr", c.base.lr);
      read_opt(b, "lr_floor", c.base.lr_floor);
      read_opt(b, "p_uncond", c.base.p_uncond);
      if (b.contains("denoiser")) {
        const json& d = b.at("denoiser");
        require_keys(d, {"query_slots", "d_model", "layers", "time_dim", "ffn_hidden"}, "base.denoiser");
        read_opt(d, "query_slots", c.base.denoiser.query_slots);
        read_opt(d, "d_model", c.base.denoiser.d_model);
        read_opt(d, "layers", c.base.denoiser.layers);
        read_opt(d, "time_dim", c.base.denoiser.time_dim);
        read_opt(d, "ffn_hidden", c.base.denoiser.ffn_hidden);
      }
    }
    if (doc.contains("customize")) {
      const json& k = doc.at("customize");
      require_keys(k, {"steps", "batch", "lr", "finetune_lr", "p_uncond", "checkpoint_every", "data_size"},
                   "customize");
      read_opt(k, "steps", c.customize_steps);
      read_opt(k, "batch", c.customize.batch);
      read_opt(k, "lr", c.customize.lr);
      read_opt(k, "finetune_lr", c.customize.finetune_lr);
      read_opt(k, "p_uncond", c.customize.p_uncond);
      read_opt(k, "checkpoint_every", c.customize.checkpoint_every);
      read_opt(k, "data_size", c.data_size);
    }
    read_opt(doc, "curve_steps", c.curve_steps);
    if (doc.contains("sampler")) {
      const json& s = doc.at("sampler");
      require_keys(s, {"steps", "guidance", "eta"}, "sampler");
      read_opt(s, "steps", c.sampler.steps);
      read_opt(s, "guidance", c.sampler.guidance);
      read_opt(s, "eta", c.sampler.eta);
    }
    if (doc.contains("metrics")) {
      const json& m = doc.at("metrics");
      require_keys(m, {"samples", "fisher_latents", "n_t", "radius", "quorum"}, "metrics");
      read_opt(m, "samples", c.eval_samples);
      read_opt(m, "fisher_latents", c.fisher_latents);
      read_opt(m, "n_t", c.n_t);
      read_opt(m, "radius", c.coverage_radius);
      read_opt(m, "quorum", c.coverage_quorum);
    }
    c.seed = doc.at("seed").get<std::uint64_t>();
    read_opt(doc, "out", c.out_dir);
    return c;
  } catch (const json::exception& e) {
    throw ContractError(std::string("malformed config: ") + e.what());
  }
}

std::string ExperimentConfig::hash() const { return sha256_hex(to_json().dump()); }

ExperimentConfig load_experiment_config(const fs::path& path) {
  if (!fs::exists(path)) throw ContractError("config file '" + path.string() + "' does not exist");
  json doc;
  try {
    doc = json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw ContractError("config '" + path.string() + "' is not valid JSON: " + e.what());
  }
  return ExperimentConfig::from_json(doc, path.parent_path());
}

// --- Experiment --------------------------------------------------------------

Experiment::Experiment(ExperimentConfig config)
    : config_(std::move(config)), config_hash_(config_.hash()), out_(config_.out_dir), schedule_(make_schedule()) {
  if (config_.world_file.empty()) {
    world_ = build_world(config_.world);
  } else {
    try {
      world_ = world_from_json(json::parse(read_file(config_.world_file)));
    } catch (const json::parse_error& e) {
      throw ContractError("world file is not valid JSON: " + std::string(e.what()));
    }
  }
  concept_ = config_.customized_concept.empty() ? world_.concepts().front().token : config_.customized_concept;
  if (!world_.contains(concept_)) throw LookupError("customized concept '" + concept_ + "' not in world");

  if (config_.target) {
    target_ = *config_.target;
  } else if (world_.name() == "grid25") {
    target_ = grid25_diagonal_target();
  } else {
    // Carriers default to the customized concept's own modalities.
    const auto all = world_.all_modality_centers();
    const auto own = world_.modality_centers(concept_);
    for (std::size_t i = 0; i < all.size(); ++i) {
      if (std::find(own.begin(), own.end(), all[i]) != own.end()) target_.carriers.push_back(i);
    }
  }
  validate(target_, world_);
  validate(config_.sampler, schedule_);
  if (config_.n_t < 1) throw ContractError("metrics.n_t must be >= 1");
  if (config_.data_size == 0 || config_.eval_samples < 2 || config_.fisher_latents == 0) {
    throw ContractError("data_size, metrics.samples and metrics.fisher_latents must be positive");
  }
  for (std::size_t i = 1; i < config_.curve_steps.size(); ++i) {
    if (config_.curve_steps[i] <= config_.curve_steps[i - 1]) {
      throw ContractError("curve_steps must be strictly increasing");
    }
  }
}

json Experiment::metadata(const std::string& key, std::size_t step) const {
  return {{"config_sha256", config_hash_}, {"config", config_.to_json()}, {"key", key}, {"step", step}};
}

std::string Experiment::base_key() const {
  const auto& b = config_.base;
  const json j = {{"world", world_to_json(world_)},
                  {"steps", b.steps},
                  {"batch", b.batch},
                  {"lr", b.lr},
                  {"lr_floor", b.lr_floor},
                  {"p_uncond", b.p_uncond},
                  {"denoiser", config_.to_json()["base"]["denoiser"]},
                  {"seed", stage_seed(config_.seed, SeedStage::base)}};
  return sha256_hex(j.dump());
}

std::string Experiment::customize_key(Method m) const {
  const json j = {{"base", base_key()},
                  {"method", infusion::to_string(m)},
                  {"concept", concept_},
                  {"target", target_to_json(target_)},
                  {"customize", config_.to_json()["customize"]},
                  {"seed", config_.seed}};
  return sha256_hex(j.dump());
}

const DenoiserWeights& Experiment::base() {
  if (base_) return *base_;
  const std::string key = base_key();
  const fs::path wpath = path("base/weights.json");
  const fs::path lpath = path("base/losses.json");
  if (fs::exists(wpath) && fs::exists(lpath)) {
    const Checkpoint c = load_checkpoint(wpath);
    const json losses = json::parse(read_file(lpath));
    if (c.metadata.value("key", "") == key && losses.value("key", "") == key) {
      base_ = weights_from_payload(c.payload);
      base_losses_ = losses.at("losses").get<std::vector<double>>();
      return *base_;
    }
  }
  TrainConfig tc = config_.base;
  tc.seed = stage_seed(config_.seed, SeedStage::base);
  tc.checkpoint_every = 0;
  BaseTrainResult r = train_base(world_, tc, schedule_);
  save_checkpoint(make_checkpoint(CheckpointKind::base_weights, weights_to_payload(r.weights),
                                  metadata(key, config_.base.steps)),
                  wpath);
  const json lj = {{"key", key}, {"config_sha256", config_hash_}, {"losses", r.losses}};
  write_file_atomic(lpath, lj.dump() + "\n");
  base_ = std::move(r.weights);
  base_losses_ = std::move(r.losses);
  return *base_;
}

const std::vector<double>& Experiment::base_losses() {
  base();
  return base_losses_;
}

const PointSet& Experiment::training_data() {
  if (!data_) {
    Rng rng(stage_seed(config_.seed, SeedStage::data));
    data_ = sample_custom_target(target_, world_, config_.data_size, rng);
  }
  return *data_;
}

PromptSpec Experiment::customized_prompt(Method m) const {
  if (m == Method::token_inversion) return customization_prompt({kPhotoOfToken, kPlaceholder}, 1, kPlaceholder);
  return customization_prompt({kPhotoOfToken, concept_}, 1, kPlaceholder);
}

PromptSpec Experiment::reference_prompt() const { return concept_prompt(concept_); }

std::vector<PromptSpec> Experiment::fisher_prompts() const {
  std::vector<PromptSpec> out;
  for (const auto& c : world_.concepts()) {
    if (c.token != concept_) out.push_back(concept_prompt(c.token));
  }
  if (out.empty()) out.push_back(PromptSpec::null(2));
  return out;
}

PointSet Experiment::fisher_latents() const {
  std::vector<std::string> sources;
  for (const auto& c : world_.concepts()) {
    if (c.token != concept_) sources.push_back(c.token);
  }
  if (sources.empty()) sources.push_back(concept_);
  Rng rng(stage_seed(config_.seed, SeedStage::eval) ^ 0xF15ull);
  PointSet out;
  out.label = "fisher-latents";
  const std::size_t n = config_.fisher_latents;
  for (std::size_t s = 0; s < sources.size(); ++s) {
    const std::size_t share = n / sources.size() + (s < n % sources.size() ? 1 : 0);
    if (share == 0) continue;
    const PointSet part = sample_concept(world_, sources[s], share, rng);
    out.points.insert(out.points.end(), part.points.begin(), part.points.end());
  }
  return out;
}

std::vector<Point2> Experiment::centers() const { return world_.modality_centers(concept_); }

const MethodCheckpoints& Experiment::customized(Method m) {
  if (auto it = customized_.find(m); it != customized_.end()) return it->second;
  const DenoiserWeights& b = base();
  const std::string key = customize_key(m);
  const fs::path dir = path(infusion::to_string(m));
  const fs::path index = dir / "losses.json";

  MethodCheckpoints mc;
  mc.method = infusion::to_string(m);
  mc.prompt = customized_prompt(m);

  auto to_model = [&](std::size_t step, const Checkpoint& c) {
    CheckpointModel cm;
    cm.step = step;
    switch (m) {
      case Method::infusion:
        cm.weights = b;
        cm.residuals = {residual_from_json(c.payload)};
        check_compatible(cm.residuals.front(), b);
        cm.dual_stream = true;
        break;
      case Method::full_finetune:
        cm.weights = weights_from_payload(c.payload);
        break;
      case Method::token_inversion:
        cm.weights = with_token_embedding(b, c.payload.at("placeholder").get<std::string>(),
                                          c.payload.at("embedding").get<std::vector<double>>());
        break;
    }
    return cm;
  };

  if (fs::exists(index)) {
    const json ij = json::parse(read_file(index));
    if (ij.value("key", "") == key) {
      for (std::size_t step : ij.at("steps").get<std::vector<std::size_t>>()) {
        const Checkpoint c = load_checkpoint(dir / step_file(step));
        if (c.metadata.value("key", "") != key) throw IntegrityError("stale checkpoint " + step_file(step));
        mc.checkpoints.push_back(to_model(step, c));
      }
      losses_[m] = ij.at("losses").get<std::vector<double>>();
      return customized_[m] = std::move(mc);
    }
  }

  CustomizeConfig cc = config_.customize;
  cc.seed = stage_seed(config_.seed, SeedStage::customize);
  cc.init_token = concept_;
  const PointSet& data = training_data();
  const std::size_t steps = config_.customize_steps;

  std::vector<std::pair<std::size_t, Checkpoint>> ckpts;
  std::vector<double> losses;
  switch (m) {
    case Method::infusion: {
      auto run = train_infusion(b, data, mc.prompt, steps, cc, schedule_);
      for (auto& [s, r] : run.checkpoints) {
        ckpts.emplace_back(s, make_checkpoint(CheckpointKind::residual, residual_to_json(r), metadata(key, s)));
      }
      losses = std::move(run.losses);
      break;
    }
    case Method::full_finetune: {
      auto run = train_full_finetune(b, data, mc.prompt, steps, cc, schedule_);
      for (auto& [s, w] : run.checkpoints) {
        ckpts.emplace_back(
            s, make_checkpoint(CheckpointKind::finetuned_weights, weights_to_payload(w), metadata(key, s)));
      }
      losses = std::move(run.losses);
      break;
    }
    case Method::token_inversion: {
      auto run = train_token_inversion(b, data, kPlaceholder, mc.prompt, steps, cc, schedule_);
      for (auto& [s, e] : run.checkpoints) {
        ckpts.emplace_back(s, make_checkpoint(CheckpointKind::token_embedding,
                                              token_to_payload(kPlaceholder, e, b.fingerprint()),
                                              metadata(key, s)));
      }
      losses = std::move(run.losses);
      break;
    }
  }
  std::vector<std::size_t> steps_saved;
  for (const auto& [s, c] : ckpts) {
    save_checkpoint(c, dir / step_file(s));
    steps_saved.push_back(s);
    mc.checkpoints.push_back(to_model(s, c));
  }
  const json ij = {{"key", key}, {"config_sha256", config_hash_}, {"steps", steps_saved}, {"losses", losses}};
  write_file_atomic(index, ij.dump() + "\n");
  losses_[m] = std::move(losses);
  return customized_[m] = std::move(mc);
}

const std::vector<double>& Experiment::customization_losses(Method m) {
  customized(m);
  return losses_.at(m);
}

CheckpointModel Experiment::model_at(Method m, std::size_t step) {
  for (const auto& c : customized(m).checkpoints) {
    if (c.step == step) return c;
  }
  throw LookupError("no " + infusion::to_string(m) + " checkpoint at step " + std::to_string(step));
}

CheckpointModel Experiment::final_model(Method m) { return customized(m).checkpoints.back(); }

PointSet Experiment::sample(const CheckpointModel& model, const PromptSpec& prompt, std::size_t n) {
  Rng rng(stage_seed(config_.seed, SeedStage::sample));
  const ResidualSet* res = model.residuals.empty() ? nullptr : &model.residuals;
  return ddim_sample(model.weights, prompt, schedule_, config_.sampler, n, rng, res, model.dual_stream).points;
}

PointSet Experiment::sample_base(const PromptSpec& prompt, std::size_t n) {
  CheckpointModel m;
  m.weights = base();
  return sample(m, prompt, n);
}

CurveEvalConfig Experiment::curve_config() const {
  CurveEvalConfig c;
  c.fisher_latents = fisher_latents();
  c.fisher_prompts = fisher_prompts();
  c.n_t = config_.n_t;
  c.sampler = config_.sampler;
  c.samples = config_.eval_samples;
  c.reference_prompt = reference_prompt();
  c.centers = centers();
  c.radius = config_.coverage_radius;
  c.quorum = config_.coverage_quorum;
  c.seed = stage_seed(config_.seed, SeedStage::eval);
  return c;
}

std::vector<CurveSeries> Experiment::curves() {
  std::vector<MethodCheckpoints> selected;
  for (Method m : config_.methods) {
    const MethodCheckpoints& all = customized(m);
    MethodCheckpoints pick{all.method, all.prompt, {}};
    if (config_.curve_steps.empty()) {
      pick.checkpoints = all.checkpoints;
    } else {
      for (std::size_t s : config_.curve_steps) pick.checkpoints.push_back(model_at(m, s));
    }
    selected.push_back(std::move(pick));
  }
  return overfitting_curves(base(), selected, curve_config(), schedule_);
}

std::string points_to_csv(const PointSet& points, const std::string& config_hash) {
  std::string out = "# config_sha256=" + config_hash + "\nx,y\n";
  char buf[64];
  for (const auto& p : points.points) {
    std::snprintf(buf, sizeof buf, "%.17g,%.17g\n", p[0], p[1]);
    out += buf;
  }
  return out;
}

}  // namespace infusion
