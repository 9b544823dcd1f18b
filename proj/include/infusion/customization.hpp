#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "infusion/diffusion.hpp"

namespace infusion {

enum class Method { infusion, full_finetune, token_inversion };

std::string to_string(Method m);
Method parse_method(const std::string& name);

struct CustomizeConfig {
  std::size_t batch = 32;
  double lr = 0.01;                // residual and token-embedding learning rate
  double finetune_lr = 1e-3;       // full fine-tune learning rate
  double p_uncond = 0.0;
  std::uint64_t seed = 0;
  std::size_t checkpoint_every = 100;  // 0 keeps only step 0 and the final step
  std::string init_token;          // token-inversion initialization
};

template <typename Artifact>
struct CustomizationRun {
  Artifact result;
  std::vector<std::pair<std::size_t, Artifact>> checkpoints;  // includes step 0
  std::vector<double> losses;
};

// Trains per-layer residual value vectors for the prompt's single concept slot.
// Every step runs the foundational pass to capture attention maps, then the
// customized pass with those maps injected and the residuals applied.
CustomizationRun<ResidualConceptEmbedding> train_infusion(const DenoiserWeights& base,
                                                          const PointSet& data,
                                                          const PromptSpec& prompt,
                                                          std::size_t steps,
                                                          const CustomizeConfig& config,
                                                          const NoiseSchedule& sched);

// All network parameters optimized on the customized data.
CustomizationRun<DenoiserWeights> train_full_finetune(const DenoiserWeights& base,
                                                      const PointSet& data,
                                                      const PromptSpec& prompt, std::size_t steps,
                                                      const CustomizeConfig& config,
                                                      const NoiseSchedule& sched);

// Only the placeholder's embedding is optimized.
CustomizationRun<std::vector<double>> train_token_inversion(const DenoiserWeights& base,
                                                            const PointSet& data,
                                                            const std::string& placeholder,
                                                            const PromptSpec& prompt,
                                                            std::size_t steps,
                                                            const CustomizeConfig& config,
                                                            const NoiseSchedule& sched);

// Copy of `base` whose token table maps `placeholder` to `embedding`.
DenoiserWeights with_token_embedding(const DenoiserWeights& base, const std::string& placeholder,
                                     const std::vector<double>& embedding);

// v with delta(layer) added to each concept-slot row whose concept has a residual.
Tensor apply_residuals(const Tensor& v, const PromptSpec& prompt, const ResidualSet& residuals,
                       std::size_t layer);

// Single-concept customization prompt: tokens with one slot at `position`.
PromptSpec customization_prompt(std::vector<std::string> tokens, std::size_t position,
                                std::string concept_token);

// Fixed-seed evaluation of the customization objective on `data`.
double customization_loss(const ScoreModel& model, const PointSet& data, const PromptSpec& prompt,
                          const NoiseSchedule& sched, std::uint64_t seed);

inline constexpr int kResidualFormatVersion = 1;

nlohmann::json residual_to_json(const ResidualConceptEmbedding& r);
ResidualConceptEmbedding residual_from_json(const nlohmann::json& doc);
// Refuses residuals trained against different weights.
void check_compatible(const ResidualConceptEmbedding& r, const DenoiserWeights& base);

}  // namespace infusion
