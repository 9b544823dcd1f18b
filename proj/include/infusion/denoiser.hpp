#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "infusion/autodiff.hpp"
#include "infusion/rng.hpp"
#include "infusion/tensor.hpp"

namespace infusion {

inline constexpr const char* kNullToken = "<null>";
inline constexpr const char* kPhotoOfToken = "photo-of";

// Token positions that carry a customized concept.
struct ConceptSlot {
  std::size_t position = 0;
  std::string concept_token;

  friend bool operator==(const ConceptSlot&, const ConceptSlot&) = default;
};

struct PromptSpec {
  std::vector<std::string> tokens;
  std::vector<ConceptSlot> concept_slots;
  bool is_null = false;

  std::size_t length() const { return tokens.size(); }
  bool has_concept_slots() const { return !concept_slots.empty(); }
  std::string key() const;

  static PromptSpec of(std::vector<std::string> tokens, std::vector<ConceptSlot> slots = {});
  // The empty condition, L copies of the null token.
  static PromptSpec null(std::size_t length);

  friend bool operator==(const PromptSpec&, const PromptSpec&) = default;
};

void validate(const PromptSpec& prompt);

struct TokenEmbeddingTable {
  std::size_t dim = 0;
  std::map<std::string, std::vector<double>> entries;

  const std::vector<double>& at(const std::string& token) const;
  bool contains(const std::string& token) const { return entries.count(token) != 0; }
};

// Tokens a customization method may learn: everything the base never trains on.
bool is_placeholder_token(const std::string& token);
std::vector<std::string> default_vocabulary();

struct DenoiserConfig {
  std::size_t query_slots = 4;
  std::size_t d_model = 32;
  std::size_t layers = 3;
  std::size_t time_dim = 16;
  std::size_t ffn_hidden = 64;

  friend bool operator==(const DenoiserConfig&, const DenoiserConfig&) = default;
};

struct LayerWeights {
  Tensor wq, wk, wv, wo;
  Tensor ff1_w, ff1_b, ff2_w, ff2_b;
};

struct DenoiserWeights {
  DenoiserConfig config;
  Tensor lift_w, lift_b;
  std::vector<LayerWeights> layers;
  Tensor head_w, head_b;
  TokenEmbeddingTable tokens;

  // Trainable network parameters (token table excluded), stable names.
  NamedTensors network_parameters() const;
  void assign_network_parameters(const NamedTensors& params);
  // Everything, including token embeddings under "token.<id>".
  NamedTensors all_tensors() const;
  static DenoiserWeights from_tensors(const DenoiserConfig& config, const NamedTensors& tensors);

  // SHA-256 over config, names, shapes and bit patterns.
  std::string fingerprint() const;
};

DenoiserWeights init_denoiser(const DenoiserConfig& config, std::uint64_t seed);

// Per-layer attention maps of one forward pass. For a batch of n points each
// map stacks the n per-point P x L matrices into an (n*P) x L matrix.
struct AttentionTrace {
  std::vector<Tensor> maps;
  std::size_t query_slots = 0;
  std::size_t prompt_length = 0;
  std::vector<int> timesteps;
  std::string prompt_key;

  std::size_t batch() const { return timesteps.size(); }
  friend bool operator==(const AttentionTrace&, const AttentionTrace&) = default;
};

// Per-layer residual value vectors for one concept.
struct ResidualConceptEmbedding {
  std::string concept_token;
  std::vector<std::vector<double>> deltas;  // [layer][d]
  std::string base_fingerprint;
  std::uint64_t steps = 0;

  std::size_t dim() const { return deltas.empty() ? 0 : deltas.front().size(); }
  static ResidualConceptEmbedding zeros(std::string concept_token, std::size_t layers,
                                        std::size_t dim, std::string base_fingerprint);
};

using ResidualSet = std::vector<ResidualConceptEmbedding>;

// Layers whose attention maps get replaced when a trace is injected.
using InjectionMask = std::vector<bool>;

Tensor encode_prompt(const PromptSpec& prompt, const TokenEmbeddingTable& table);

struct CrossAttentionResult {
  Tensor output;
  Tensor map;
};

// map = softmax_rows(q k^T / sqrt(d)), output = map v.
CrossAttentionResult cross_attention(const Tensor& q, const Tensor& k, const Tensor& v);

Tensor time_embedding(std::span<const int> timesteps, std::size_t dim);

// --- recorded forward --------------------------------------------------------

struct LayerVars {
  Var wq, wk, wv, wo, ff1_w, ff1_b, ff2_w, ff2_b;
};

struct DenoiserVars {
  Var lift_w, lift_b;
  std::vector<LayerVars> layers;
  Var head_w, head_b;
};

DenoiserVars bind_constants(Tape& tape, const DenoiserWeights& weights);
// Registers every network tensor as a tape parameter under its stable name.
DenoiserVars bind_parameters(Tape& tape, const DenoiserWeights& weights);

// Residual deltas (one 1 x d Var per layer) attached at a prompt position.
struct SlotResidual {
  std::size_t position = 0;
  std::vector<Var> deltas;
};

// Matches prompt concept slots against a residual set; slots without a
// residual are skipped. Rejects overlapping slots.
std::vector<SlotResidual> bind_residuals(Tape& tape, const PromptSpec& prompt,
                                         const ResidualSet& residuals, const DenoiserConfig& config);

struct ForwardRequest {
  Var z;                                  // n x 2
  std::span<const int> timesteps;         // n
  Var tokens;                             // L x d
  std::span<const SlotResidual> residuals;
  const AttentionTrace* injected = nullptr;
  const InjectionMask* mask = nullptr;
  std::string prompt_key;
};

struct ForwardOutput {
  Var eps;                     // n x 2
  AttentionTrace trace;        // natively computed maps
  std::vector<Tensor> values;  // value matrix (with residuals) per layer
};

ForwardOutput denoise_forward(Tape& tape, const DenoiserVars& net, const DenoiserConfig& config,
                              const ForwardRequest& request);

// --- inference convenience ---------------------------------------------------

struct DenoiseResult {
  Tensor eps;
  AttentionTrace trace;
  std::vector<Tensor> values;
};

DenoiseResult denoise_forward(const DenoiserWeights& weights, const Tensor& z,
                              std::span<const int> timesteps, const PromptSpec& prompt,
                              const ResidualSet* residuals = nullptr,
                              const AttentionTrace* injected = nullptr,
                              const InjectionMask* mask = nullptr);

PromptSpec drop_condition(const PromptSpec& prompt, double p_uncond, Rng& rng);

}  // namespace infusion
