#include "infusion/denoiser.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <set>
#include <sstream>

#include "infusion/errors.hpp"
#include "infusion/hashing.hpp"

namespace infusion {

// --- prompts -----------------------------------------------------------------

std::string PromptSpec::key() const {
  std::ostringstream os;
  if (is_null) os << "null:";
  for (std::size_t i = 0; i < tokens.size(); ++i) os << (i ? " " : "") << tokens[i];
  for (const auto& s : concept_slots) os << " @" << s.position << "=" << s.concept_token;
  return os.str();
}

PromptSpec PromptSpec::of(std::vector<std::string> tokens, std::vector<ConceptSlot> slots) {
  PromptSpec p{std::move(tokens), std::move(slots), false};
  validate(p);
  return p;
}

PromptSpec PromptSpec::null(std::size_t length) {
  return PromptSpec{std::vector<std::string>(std::max<std::size_t>(length, 1), kNullToken), {}, true};
}

void validate(const PromptSpec& prompt) {
  if (prompt.tokens.empty()) throw ContractError("prompt has no tokens");
  if (prompt.is_null && prompt.has_concept_slots()) {
    throw ContractError("null prompt cannot carry concept slots");
  }
  std::set<std::size_t> seen;
  for (const auto& slot : prompt.concept_slots) {
    if (slot.position >= prompt.length()) {
      throw ContractError("concept slot position " + std::to_string(slot.position) +
                          " outside prompt of length " + std::to_string(prompt.length()));
    }
    if (!seen.insert(slot.position).second) {
      throw ContractError("overlapping concept slots at position " + std::to_string(slot.position));
    }
  }
}

const std::vector<double>& TokenEmbeddingTable::at(const std::string& token) const {
  auto it = entries.find(token);
  if (it == entries.end()) throw LookupError("unknown token '" + token + "'");
  return it->second;
}

bool is_placeholder_token(const std::string& token) { return token.rfind("<obj", 0) == 0; }

std::vector<std::string> default_vocabulary() {
  return {kNullToken, kPhotoOfToken, "A", "B", "C", "D", "super", "<obj1>", "<obj2>"};
}

Tensor encode_prompt(const PromptSpec& prompt, const TokenEmbeddingTable& table) {
  validate(prompt);
  const std::size_t L = prompt.length(), d = table.dim;
  Tensor out = Tensor::zeros(L, d);
  for (std::size_t k = 0; k < L; ++k) {
    const auto& e = table.at(prompt.is_null ? std::string(kNullToken) : prompt.tokens[k]);
    if (e.size() != d) throw ShapeError("token embedding width mismatch");
    std::copy(e.begin(), e.end(), out.row_span(k).begin());
  }
  return out;
}

// --- weights -----------------------------------------------------------------

namespace {

template <typename L, typename F>
void for_each_layer_field(L& layer, F&& f) {
  f("wq", layer.wq);
  f("wk", layer.wk);
  f("wv", layer.wv);
  f("wo", layer.wo);
  f("ff1_w", layer.ff1_w);
  f("ff1_b", layer.ff1_b);
  f("ff2_w", layer.ff2_w);
  f("ff2_b", layer.ff2_b);
}

std::string layer_name(std::size_t i, const char* field) {
  return "layer" + std::to_string(i) + "." + field;
}

Tensor random_matrix(std::size_t rows, std::size_t cols, double stddev, Rng& rng) {
  Tensor t = Tensor::zeros(rows, cols);
  for (double& v : t.values()) v = stddev * rng.normal();
  return t;
}

}  // namespace

NamedTensors DenoiserWeights::network_parameters() const {
  NamedTensors out;
  out["lift.w"] = lift_w;
  out["lift.b"] = lift_b;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    for_each_layer_field(layers[i], [&](const char* f, const Tensor& t) { out[layer_name(i, f)] = t; });
  }
  out["head.w"] = head_w;
  out["head.b"] = head_b;
  return out;
}

void DenoiserWeights::assign_network_parameters(const NamedTensors& params) {
  auto take = [&](const std::string& name, Tensor& dst) {
    auto it = params.find(name);
    if (it == params.end()) throw LookupError("missing denoiser tensor '" + name + "'");
    if (dst.size() && !it->second.same_shape(dst)) {
      throw ShapeError("tensor '" + name + "' has shape " + shape_string(it->second.shape()) +
                       ", expected " + shape_string(dst.shape()));
    }
    dst = it->second;
  };
  take("lift.w", lift_w);
  take("lift.b", lift_b);
  for (std::size_t i = 0; i < layers.size(); ++i) {
    for_each_layer_field(layers[i], [&](const char* f, Tensor& t) { take(layer_name(i, f), t); });
  }
  take("head.w", head_w);
  take("head.b", head_b);
}

NamedTensors DenoiserWeights::all_tensors() const {
  NamedTensors out = network_parameters();
  for (const auto& [tok, e] : tokens.entries) out["token." + tok] = Tensor::row(e);
  return out;
}

DenoiserWeights DenoiserWeights::from_tensors(const DenoiserConfig& config,
                                              const NamedTensors& tensors) {
  DenoiserWeights w;
  w.config = config;
  w.layers.resize(config.layers);
  w.assign_network_parameters(tensors);
  w.tokens.dim = config.d_model;
  for (const auto& [name, t] : tensors) {
    if (name.rfind("token.", 0) != 0) continue;
    if (t.size() != config.d_model) throw ShapeError("token embedding '" + name + "' width mismatch");
    w.tokens.entries[name.substr(6)] = t.values();
  }
  const std::size_t pd = config.query_slots * config.d_model;
  if (w.lift_w.shape() != std::vector<std::size_t>{2 + config.time_dim, pd} ||
      w.head_w.shape() != std::vector<std::size_t>{pd, 2}) {
    throw ShapeError("denoiser tensors do not match config");
  }
  if (!w.tokens.contains(kNullToken)) throw LookupError("token table lacks the null token");
  return w;
}

std::string DenoiserWeights::fingerprint() const {
  std::ostringstream os;
  os << "P=" << config.query_slots << ";d=" << config.d_model << ";N=" << config.layers
     << ";T=" << config.time_dim << ";H=" << config.ffn_hidden << ";";
  std::string bytes = os.str();
  for (const auto& [name, t] : all_tensors()) {
    bytes += name + shape_string(t.shape());
    bytes.append(reinterpret_cast<const char*>(t.values().data()), t.size() * sizeof(double));
  }
  return sha256_hex(bytes);
}

DenoiserWeights init_denoiser(const DenoiserConfig& config, std::uint64_t seed) {
  if (config.layers < 2) throw ContractError("denoiser needs at least 2 cross-attention layers");
  if (config.query_slots == 0 || config.d_model == 0 || config.time_dim % 2 != 0) {
    throw ContractError("invalid denoiser config");
  }
  Rng rng(seed);
  const std::size_t d = config.d_model, h = config.ffn_hidden, pd = config.query_slots * d;
  const std::size_t in = 2 + config.time_dim;
  auto inv_sqrt = [](std::size_t n) { return 1.0 / std::sqrt(static_cast<double>(n)); };

  DenoiserWeights w;
  w.config = config;
  w.lift_w = random_matrix(in, pd, inv_sqrt(in), rng);
  w.lift_b = Tensor::zeros(1, pd);
  for (std::size_t i = 0; i < config.layers; ++i) {
    LayerWeights l;
    l.wq = random_matrix(d, d, inv_sqrt(d), rng);
    l.wk = random_matrix(d, d, inv_sqrt(d), rng);
    l.wv = random_matrix(d, d, inv_sqrt(d), rng);
    l.wo = random_matrix(d, d, 0.5 * inv_sqrt(d), rng);
    l.ff1_w = random_matrix(d, h, inv_sqrt(d), rng);
    l.ff1_b = Tensor::zeros(1, h);
    l.ff2_w = random_matrix(h, d, 0.5 * inv_sqrt(h), rng);
    l.ff2_b = Tensor::zeros(1, d);
    w.layers.push_back(std::move(l));
  }
  w.head_w = random_matrix(pd, 2, 0.5 * inv_sqrt(pd), rng);
  w.head_b = Tensor::zeros(1, 2);

  w.tokens.dim = d;
  for (const auto& tok : default_vocabulary()) {
    std::vector<double> e(d);
    for (double& v : e) v = rng.normal();
    w.tokens.entries[tok] = std::move(e);
  }
  return w;
}

ResidualConceptEmbedding ResidualConceptEmbedding::zeros(std::string concept_token,
                                                         std::size_t layers, std::size_t dim,
                                                         std::string base_fingerprint) {
  return ResidualConceptEmbedding{std::move(concept_token),
                                  std::vector<std::vector<double>>(layers, std::vector<double>(dim)),
                                  std::move(base_fingerprint), 0};
}

// --- attention ---------------------------------------------------------------

CrossAttentionResult cross_attention(const Tensor& q, const Tensor& k, const Tensor& v) {
  if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2 || q.cols() != k.cols() ||
      k.rows() != v.rows()) {
    throw ShapeError("cross_attention: q " + shape_string(q.shape()) + ", k " +
                     shape_string(k.shape()) + ", v " + shape_string(v.shape()));
  }
  Tensor scores;
  kernels::matmul_nt(q, k, scores);
  const double s = 1.0 / std::sqrt(static_cast<double>(q.cols()));
  for (double& x : scores.values()) x *= s;
  CrossAttentionResult r;
  kernels::softmax_rows(scores, r.map);
  kernels::matmul(r.map, v, r.output);
  return r;
}

Tensor time_embedding(std::span<const int> timesteps, std::size_t dim) {
  const std::size_t half = dim / 2;
  Tensor out = Tensor::zeros(timesteps.size(), dim);
  for (std::size_t i = 0; i < timesteps.size(); ++i) {
    const double t = static_cast<double>(timesteps[i]);
    for (std::size_t k = 0; k < half; ++k) {
      const double freq = std::exp(-std::log(10000.0) * static_cast<double>(k) / static_cast<double>(half));
      out(i, k) = std::sin(t * freq);
      out(i, half + k) = std::cos(t * freq);
    }
  }
  return out;
}

// --- recorded forward --------------------------------------------------------

namespace {

template <typename Bind>
DenoiserVars bind_with(const DenoiserWeights& w, Bind&& bind) {
  DenoiserVars net;
  net.lift_w = bind("lift.w", w.lift_w);
  net.lift_b = bind("lift.b", w.lift_b);
  for (std::size_t i = 0; i < w.layers.size(); ++i) {
    const LayerWeights& l = w.layers[i];
    net.layers.push_back(LayerVars{
        bind(layer_name(i, "wq"), l.wq), bind(layer_name(i, "wk"), l.wk),
        bind(layer_name(i, "wv"), l.wv), bind(layer_name(i, "wo"), l.wo),
        bind(layer_name(i, "ff1_w"), l.ff1_w), bind(layer_name(i, "ff1_b"), l.ff1_b),
        bind(layer_name(i, "ff2_w"), l.ff2_w), bind(layer_name(i, "ff2_b"), l.ff2_b)});
  }
  net.head_w = bind("head.w", w.head_w);
  net.head_b = bind("head.b", w.head_b);
  return net;
}

}  // namespace

DenoiserVars bind_constants(Tape& tape, const DenoiserWeights& weights) {
  return bind_with(weights, [&](const std::string&, const Tensor& t) { return tape.constant(t); });
}

DenoiserVars bind_parameters(Tape& tape, const DenoiserWeights& weights) {
  return bind_with(weights,
                   [&](const std::string& name, const Tensor& t) { return tape.parameter(name, t); });
}

std::vector<SlotResidual> bind_residuals(Tape& tape, const PromptSpec& prompt,
                                         const ResidualSet& residuals,
                                         const DenoiserConfig& config) {
  validate(prompt);
  std::vector<SlotResidual> out;
  for (const auto& slot : prompt.concept_slots) {
    auto it = std::find_if(residuals.begin(), residuals.end(), [&](const auto& r) {
      return r.concept_token == slot.concept_token;
    });
    if (it == residuals.end()) continue;
    if (it->deltas.size() != config.layers) {
      throw ShapeError("residual '" + it->concept_token + "' has " +
                       std::to_string(it->deltas.size()) + " layers, denoiser has " +
                       std::to_string(config.layers));
    }
    SlotResidual sr{slot.position, {}};
    for (const auto& delta : it->deltas) {
      if (delta.size() != config.d_model) {
        throw ShapeError("residual '" + it->concept_token + "' width " +
                         std::to_string(delta.size()) + " != d " + std::to_string(config.d_model));
      }
      sr.deltas.push_back(tape.constant(Tensor::row(delta)));
    }
    out.push_back(std::move(sr));
  }
  return out;
}

ForwardOutput denoise_forward(Tape& tape, const DenoiserVars& net, const DenoiserConfig& config,
                              const ForwardRequest& req) {
  const std::size_t n = req.z.value().rows();
  const std::size_t P = config.query_slots, d = config.d_model;
  const std::size_t L = req.tokens.value().rows();
  if (req.z.value().cols() != 2 || req.timesteps.size() != n) {
    throw ShapeError("denoise_forward: z must be n x 2 with one timestep per row");
  }
  if (req.tokens.value().cols() != d) throw ShapeError("denoise_forward: token width != d");
  if (net.layers.size() != config.layers) throw ShapeError("denoise_forward: layer count mismatch");
  if (req.injected) {
    const AttentionTrace& inj = *req.injected;
    bool ok = inj.maps.size() == config.layers && inj.prompt_length == L && inj.query_slots == P;
    for (const auto& m : inj.maps) ok = ok && m.shape() == std::vector<std::size_t>{n * P, L};
    if (!ok) {
      throw ContractError("injected attention trace does not match this forward pass (layers, P, L, batch)");
    }
  }
  if (req.mask && req.mask->size() != config.layers) {
    throw ContractError("injection mask length != layer count");
  }
  for (const auto& sr : req.residuals) {
    if (sr.position >= L || sr.deltas.size() != config.layers) {
      throw ShapeError("slot residual does not fit prompt/denoiser");
    }
  }

  ForwardOutput out;
  out.trace.query_slots = P;
  out.trace.prompt_length = L;
  out.trace.timesteps.assign(req.timesteps.begin(), req.timesteps.end());
  out.trace.prompt_key = req.prompt_key;

  Var temb = tape.constant(time_embedding(req.timesteps, config.time_dim));
  Var lifted = add_row_broadcast(matmul(concat_cols(req.z, temb), net.lift_w), net.lift_b);
  Var h = reshape(lifted, n * P, d);
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));

  for (std::size_t i = 0; i < config.layers; ++i) {
    const LayerVars& lw = net.layers[i];
    Var q = matmul(h, lw.wq);
    Var k = matmul(req.tokens, lw.wk);
    Var v = matmul(req.tokens, lw.wv);
    for (const auto& sr : req.residuals) v = add_to_row(v, sr.deltas[i], sr.position);
    Var native = softmax_rows(scale(matmul_nt(q, k), inv_sqrt_d));
    out.trace.maps.push_back(native.value());
    out.values.push_back(v.value());
    const bool inject = req.injected && (!req.mask || (*req.mask)[i]);
    Var map = inject ? tape.constant(req.injected->maps[i]) : native;
    Var attended = matmul(map, v);
    h = add(h, matmul(attended, lw.wo));
    Var ff = add_row_broadcast(matmul(silu(add_row_broadcast(matmul(h, lw.ff1_w), lw.ff1_b)), lw.ff2_w),
                               lw.ff2_b);
    h = add(h, ff);
  }
  out.eps = add_row_broadcast(matmul(reshape(h, n, P * d), net.head_w), net.head_b);
  return out;
}

DenoiseResult denoise_forward(const DenoiserWeights& weights, const Tensor& z,
                              std::span<const int> timesteps, const PromptSpec& prompt,
                              const ResidualSet* residuals, const AttentionTrace* injected,
                              const InjectionMask* mask) {
  Tape tape;
  const DenoiserVars net = bind_constants(tape, weights);
  std::vector<SlotResidual> slots;
  if (residuals) slots = bind_residuals(tape, prompt, *residuals, weights.config);
  ForwardRequest req{tape.constant(z), timesteps, tape.constant(encode_prompt(prompt, weights.tokens)),
                     slots, injected, mask, prompt.key()};
  ForwardOutput f = denoise_forward(tape, net, weights.config, req);
  return DenoiseResult{f.eps.value(), std::move(f.trace), std::move(f.values)};
}

PromptSpec drop_condition(const PromptSpec& prompt, double p_uncond, Rng& rng) {
  if (!(p_uncond >= 0.0 && p_uncond <= 1.0)) {
    throw ContractError("drop_condition: p_uncond must lie in [0,1]");
  }
  const double u = rng.uniform();
  return u < p_uncond ? PromptSpec::null(prompt.length()) : prompt;
}

}  // namespace infusion
