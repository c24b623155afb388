#pragma once

// Weight checkpoint container. Layout on disk:
//   "CROSSTRACE-CKPT1\n"
//   one-line JSON header: {"format":1,"config":{...},"tensors":[{name,rows,cols},...]}
//   raw little-endian float64 payloads, row-major, in header order
// Round-trips are bit-exact.

#include <cstdint>
#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>

#include "crosstrace/model.hpp"

namespace crosstrace {

inline constexpr char kCheckpointMagic[] = "CROSSTRACE-CKPT1";

nlohmann::json model_config_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);

void save_checkpoint(const std::filesystem::path& path, const Weights& w);
Weights load_checkpoint(const std::filesystem::path& path);

/// FNV-1a over a byte range, chainable via the seed argument.
uint64_t fnv1a(const void* data, size_t n,
               uint64_t seed = 0xcbf29ce484222325ull);

/// FNV-1a of an entire file's contents. Throws if unreadable.
uint64_t file_fnv1a(const std::filesystem::path& path);

}  // namespace crosstrace
