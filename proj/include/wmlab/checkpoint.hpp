#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <vector>

#include <json.hpp>

#include "wmlab/model.hpp"

namespace wmlab {

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Binary checkpoint body (all integers and doubles little-endian):
///
///   "WMLB"                       magic, 4 bytes
///   u32 version
///   u64 seed
///   u32 rank, u64 dims[rank]     per-sample input shape
///   u32 layer_count, then per layer:
///       u32 kind, u64 in, out, kernel, stride, padding, channels
///   u32 param_count, then per tensor:
///       u32 name_len, name bytes, u32 rank, u64 dims[rank], f64 data[prod(dims)]
///   u32 bn_count, then per BatchNorm layer:
///       u64 layer, f64 momentum, f64 eps, u64 channels, f64 mean[c], f64 var[c]
///   u32 mask_count, then per masked layer:
///       u64 layer, u64 len, u8 keep[len]
std::vector<std::byte> encode_checkpoint(const ModelState& model);
ModelState decode_checkpoint(std::span<const std::byte> bytes);

/// Architecture descriptor list as JSON.
nlohmann::json architecture_json(const ModelState& model);

/// Writes `path` and the metadata sidecar `path` + ".json". The sidecar
/// records the body's sha256, the model checksum, the descriptor list and any
/// caller metadata (e.g. attack provenance).
void save_checkpoint(const ModelState& model, const std::filesystem::path& path,
                     const nlohmann::json& metadata = nlohmann::json::object());

struct LoadedCheckpoint {
  ModelState model;
  nlohmann::json sidecar;
};

/// Loads a checkpoint; with `verify` the body digest must match the sidecar
/// (IntegrityError otherwise).
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path, bool verify = true);

std::filesystem::path sidecar_path(const std::filesystem::path& checkpoint);

}  // namespace wmlab
