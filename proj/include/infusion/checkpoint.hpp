#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "infusion/denoiser.hpp"

namespace infusion {

enum class CheckpointKind { base_weights, finetuned_weights, residual, token_embedding };

std::string to_string(CheckpointKind kind);
CheckpointKind parse_checkpoint_kind(const std::string& s);

inline constexpr int kCheckpointFormatVersion = 1;

struct Checkpoint {
  CheckpointKind kind = CheckpointKind::base_weights;
  nlohmann::json payload;
  std::string hash;  // sha256 of the serialized payload
  nlohmann::json metadata = nlohmann::json::object();

  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

Checkpoint make_checkpoint(CheckpointKind kind, nlohmann::json payload, nlohmann::json metadata);
std::string payload_hash(const nlohmann::json& payload);

std::string serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint parse_checkpoint(const std::string& text);

// Atomic: writes a sibling temp file, then renames it over `path`.
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
// Throws IntegrityError on unreadable or tampered files, MigrationError on
// unknown format versions.
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Named tensors with explicit shapes; values hex-encoded for bit-exactness.
nlohmann::json weights_to_payload(const DenoiserWeights& weights);
DenoiserWeights weights_from_payload(const nlohmann::json& payload);

nlohmann::json token_to_payload(const std::string& placeholder, const std::vector<double>& embedding,
                                const std::string& base_fingerprint);

void write_file_atomic(const std::filesystem::path& path, const std::string& contents);
std::string read_file(const std::filesystem::path& path);

}  // namespace infusion
