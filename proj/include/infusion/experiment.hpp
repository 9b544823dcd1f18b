#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "infusion/customization.hpp"
#include "infusion/metrics.hpp"

namespace infusion {

// Named bundle of hyperparameters applied before file and flag overrides.
struct Preset {
  std::string name;
  double lr = 0.01;
  std::size_t batch = 32;
  int sampler_steps = 50;
  double guidance = 2.0;
  std::size_t d_model = 32;  // recorded; toy sizes keep the denoiser's own d
};

Preset find_preset(const std::string& name);

struct ExperimentConfig {
  std::string preset = "toy";
  std::string world = "four-peak";  // builtin name
  std::string world_file;           // overrides `world` when set
  std::string customized_concept;   // defaults to the world's first concept
  std::optional<LinearTarget> target;
  std::vector<Method> methods{Method::infusion, Method::full_finetune, Method::token_inversion};

  TrainConfig base;
  CustomizeConfig customize;
  std::size_t customize_steps = 2000;
  std::size_t data_size = 512;
  std::vector<std::size_t> curve_steps{0, 100, 200, 400, 1000, 2000};

  SamplerConfig sampler;
  std::size_t eval_samples = 1000;
  std::size_t fisher_latents = 2000;
  int n_t = 8;
  double coverage_radius = kDefaultCoverageRadius;
  std::size_t coverage_quorum = kDefaultQuorum;

  std::uint64_t seed = 20240501;
  std::string out_dir = "runs/default";

  nlohmann::json to_json() const;
  // Unknown keys are rejected. Relative world_file paths resolve against base_dir.
  static ExperimentConfig from_json(const nlohmann::json& doc, const std::filesystem::path& base_dir = {});
  // Applies a preset's values over the current ones.
  void apply_preset(const Preset& p);
  std::string hash() const;
};

inline constexpr int kConfigFormatVersion = 1;

ExperimentConfig load_experiment_config(const std::filesystem::path& path);

// Load-or-compute pipeline over one output directory. Trained artifacts are
// cached as checkpoints keyed by the settings that determine them.
class Experiment {
 public:
  explicit Experiment(ExperimentConfig config);

  const ExperimentConfig& config() const { return config_; }
  const ConceptWorld& world() const { return world_; }
  const NoiseSchedule& schedule() const { return schedule_; }
  const std::filesystem::path& out_dir() const { return out_; }
  const std::string& config_hash() const { return config_hash_; }

  const DenoiserWeights& base();
  const std::vector<double>& base_losses();
  const PointSet& training_data();
  const LinearTarget& target() const { return target_; }

  PromptSpec customized_prompt(Method m) const;
  PromptSpec reference_prompt() const;
  std::vector<PromptSpec> fisher_prompts() const;
  PointSet fisher_latents() const;
  std::vector<Point2> centers() const;

  // All checkpoints of a method, trained or loaded from disk.
  const MethodCheckpoints& customized(Method m);
  const std::vector<double>& customization_losses(Method m);
  CheckpointModel model_at(Method m, std::size_t step);
  CheckpointModel final_model(Method m);

  PointSet sample(const CheckpointModel& model, const PromptSpec& prompt, std::size_t n);
  PointSet sample_base(const PromptSpec& prompt, std::size_t n);

  std::vector<CurveSeries> curves();
  CurveEvalConfig curve_config() const;

  std::filesystem::path path(const std::string& relative) const { return out_ / relative; }

 private:
  std::string base_key() const;
  std::string customize_key(Method m) const;
  nlohmann::json metadata(const std::string& key, std::size_t step) const;

  ExperimentConfig config_;
  std::string config_hash_;
  std::filesystem::path out_;
  ConceptWorld world_;
  NoiseSchedule schedule_;
  LinearTarget target_;
  std::string concept_;
  std::optional<DenoiserWeights> base_;
  std::vector<double> base_losses_;
  std::optional<PointSet> data_;
  std::map<Method, MethodCheckpoints> customized_;
  std::map<Method, std::vector<double>> losses_;
};

// Stage seeds derived from the experiment's master seed.
enum class SeedStage : std::uint64_t { base = 1, data = 2, customize = 3, sample = 4, eval = 5 };
std::uint64_t stage_seed(std::uint64_t master, SeedStage stage);

std::string points_to_csv(const PointSet& points, const std::string& config_hash);

}  // namespace infusion
