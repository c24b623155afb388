#pragma once

// Run configuration: one JSON file drives every pipeline stage. Unknown
// keys are rejected by name; omitted keys fall back to defaults. All
// randomness derives from the single root seed, split per stage.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "crosstrace/inject.hpp"
#include "crosstrace/model.hpp"
#include "crosstrace/rng.hpp"
#include "crosstrace/synth.hpp"
#include "crosstrace/train.hpp"

namespace crosstrace {

struct PathsConfig {
  std::string dataset = "out/dataset.jsonl";
  std::string checkpoint = "out/model.ckpt";
  std::string out_dir = "out";
};

struct TraceSettings {
  double sigma = 0.5;
  double eps_d = 1e-3;
  int max_samples = 200;  // eval-split samples fed to the sweep
};

struct InjectSettings {
  int k1 = 3;
  int k2 = 5;
  double lambda_attn = 0.26;
  double lambda_mlp = 0.16;
  bool use_rr_scaling = true;
  bool use_normalization = true;
  std::string component = "both";      // both | attn | mlp | hidden
  std::string target_mode = "rr_rank"; // rr_rank | after_deepest_source
  std::string layer_range = "all";     // all | first<N> | last<N>
};

struct EvalSettings {
  int max_samples = 0;  // 0: whole eval split
  int latency_reps = 10;
  int latency_decode_len = 16;
  int caption_max_new = 24;
};

struct RunConfig {
  uint64_t seed = 1;
  PathsConfig paths;
  ModelConfig model;  // vocab/patch fields are derived, not configured
  SynthConfig synth;
  TrainConfig train;
  TraceSettings trace;
  InjectSettings inject;
  EvalSettings eval;
};

/// Stage indices used to fork the root seed; keep stable across versions.
enum class Stage : uint64_t {
  DataGen = 0,
  Train = 1,
  SigmaCalibration = 2,
  TraceCorruption = 3,
  Eval = 4,
  LambdaCalibration = 5,
};

inline Rng stage_rng(uint64_t seed, Stage stage) {
  Rng root(seed);
  return root.fork(static_cast<uint64_t>(stage));
}

RunConfig load_config(const std::filesystem::path& path);
void save_config(const std::filesystem::path& path, const RunConfig& cfg);
nlohmann::json config_json(const RunConfig& cfg);

/// FNV-1a of the canonical JSON dump, hex-encoded.
std::string config_hash(const RunConfig& cfg);

/// "all", "first<N>", or "last<N>" to concrete layer indices.
std::vector<int> parse_layer_range(const std::string& range, int n_layers);
InjectComponent parse_inject_component(const std::string& name);
TargetMode parse_target_mode(const std::string& name);

}  // namespace crosstrace
