#include "infusion/checkpoint.hpp"

#include <fstream>
#include <sstream>

#include "infusion/errors.hpp"
#include "infusion/hashing.hpp"

namespace infusion {

namespace fs = std::filesystem;

std::string to_string(CheckpointKind kind) {
  switch (kind) {
    case CheckpointKind::base_weights: return "base-weights";
    case CheckpointKind::finetuned_weights: return "finetuned-weights";
    case CheckpointKind::residual: return "residual";
    case CheckpointKind::token_embedding: return "token-embedding";
  }
  return "unknown";
}

CheckpointKind parse_checkpoint_kind(const std::string& s) {
  if (s == "base-weights") return CheckpointKind::base_weights;
  if (s == "finetuned-weights") return CheckpointKind::finetuned_weights;
  if (s == "residual") return CheckpointKind::residual;
  if (s == "token-embedding") return CheckpointKind::token_embedding;
  throw IntegrityError("unknown checkpoint kind '" + s + "'");
}

std::string payload_hash(const nlohmann::json& payload) { return sha256_hex(payload.dump()); }

Checkpoint make_checkpoint(CheckpointKind kind, nlohmann::json payload, nlohmann::json metadata) {
  Checkpoint c{kind, std::move(payload), {}, std::move(metadata)};
  c.hash = payload_hash(c.payload);
  return c;
}

std::string serialize_checkpoint(const Checkpoint& ckpt) {
  nlohmann::json doc = {{"format_version", kCheckpointFormatVersion},
                        {"kind", to_string(ckpt.kind)},
                        {"hash", ckpt.hash},
                        {"metadata", ckpt.metadata},
                        {"payload", ckpt.payload}};
  return doc.dump(1) + "\n";
}

Checkpoint parse_checkpoint(const std::string& text) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw IntegrityError(std::string("checkpoint is not valid JSON (truncated?): ") + e.what());
  }
  if (!doc.is_object() || !doc.contains("format_version")) {
    throw IntegrityError("checkpoint lacks format_version");
  }
  if (doc.at("format_version") != kCheckpointFormatVersion) {
    throw MigrationError("checkpoint format_version " + doc.at("format_version").dump() +
                         " is not supported (expected " + std::to_string(kCheckpointFormatVersion) + ")");
  }
  try {
    Checkpoint c;
    c.kind = parse_checkpoint_kind(doc.at("kind").get<std::string>());
    c.hash = doc.at("hash").get<std::string>();
    c.metadata = doc.at("metadata");
    c.payload = doc.at("payload");
    if (payload_hash(c.payload) != c.hash) throw IntegrityError("checkpoint hash does not match payload");
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw IntegrityError(std::string("malformed checkpoint: ") + e.what());
  }
}

void write_file_atomic(const fs::path& path, const std::string& contents) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ContractError("cannot write '" + tmp.string() + "'");
    out << contents;
    if (!out) throw ContractError("write failed for '" + tmp.string() + "'");
  }
  fs::rename(tmp, path);
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ContractError("cannot read '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void save_checkpoint(const Checkpoint& ckpt, const fs::path& path) {
  write_file_atomic(path, serialize_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const fs::path& path) { return parse_checkpoint(read_file(path)); }

nlohmann::json weights_to_payload(const DenoiserWeights& weights) {
  const DenoiserConfig& c = weights.config;
  nlohmann::json tensors = nlohmann::json::array();
  for (const auto& [name, t] : weights.all_tensors()) {
    std::string hex;
    hex.reserve(t.size() * 16);
    for (double v : t.values()) hex += double_to_hex(v);
    tensors.push_back({{"name", name}, {"shape", t.shape()}, {"hex", hex}});
  }
  return {{"config",
           {{"query_slots", c.query_slots},
            {"d_model", c.d_model},
            {"layers", c.layers},
            {"time_dim", c.time_dim},
            {"ffn_hidden", c.ffn_hidden}}},
          {"fingerprint", weights.fingerprint()},
          {"tensors", tensors}};
}

DenoiserWeights weights_from_payload(const nlohmann::json& payload) {
  try {
    const auto& jc = payload.at("config");
    DenoiserConfig c{jc.at("query_slots").get<std::size_t>(), jc.at("d_model").get<std::size_t>(),
                     jc.at("layers").get<std::size_t>(), jc.at("time_dim").get<std::size_t>(),
                     jc.at("ffn_hidden").get<std::size_t>()};
    NamedTensors tensors;
    for (const auto& jt : payload.at("tensors")) {
      auto shape = jt.at("shape").get<std::vector<std::size_t>>();
      const auto hex = jt.at("hex").get<std::string>();
      if (hex.size() % 16 != 0) throw IntegrityError("tensor hex payload has ragged length");
      std::vector<double> data(hex.size() / 16);
      for (std::size_t i = 0; i < data.size(); ++i) {
        data[i] = hex_to_double(std::string_view(hex).substr(16 * i, 16));
      }
      tensors.emplace(jt.at("name").get<std::string>(), Tensor(std::move(shape), std::move(data)));
    }
    DenoiserWeights w = DenoiserWeights::from_tensors(c, tensors);
    if (w.fingerprint() != payload.at("fingerprint").get<std::string>()) {
      throw IntegrityError("weights fingerprint does not match tensors");
    }
    return w;
  } catch (const nlohmann::json::exception& e) {
    throw IntegrityError(std::string("malformed weights payload: ") + e.what());
  } catch (const ShapeError& e) {
    throw IntegrityError(std::string("weights payload inconsistent: ") + e.what());
  }
}

nlohmann::json token_to_payload(const std::string& placeholder, const std::vector<double>& embedding,
                                const std::string& base_fingerprint) {
  return {{"placeholder", placeholder}, {"embedding", embedding}, {"base_fingerprint", base_fingerprint}};
}

}  // namespace infusion
