#include "crosstrace/checkpoint.hpp"

#include <fstream>
#include <stdexcept>
#include <vector>

namespace crosstrace {

using nlohmann::json;

nlohmann::json model_config_json(const ModelConfig& cfg) {
  return json{{"n_layers", cfg.n_layers},
              {"d_model", cfg.d_model},
              {"n_heads", cfg.n_heads},
              {"d_ff", cfg.d_ff},
              {"vocab_size", cfg.vocab_size},
              {"patch_rows", cfg.patch_rows},
              {"patch_cols", cfg.patch_cols},
              {"feat_dim", cfg.feat_dim},
              {"max_seq", cfg.max_seq},
              {"tie_output", cfg.tie_output},
              {"ln_eps", cfg.ln_eps}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig cfg;
  cfg.n_layers = j.at("n_layers").get<int>();
  cfg.d_model = j.at("d_model").get<int>();
  cfg.n_heads = j.at("n_heads").get<int>();
  cfg.d_ff = j.at("d_ff").get<int>();
  cfg.vocab_size = j.at("vocab_size").get<int>();
  cfg.patch_rows = j.at("patch_rows").get<int>();
  cfg.patch_cols = j.at("patch_cols").get<int>();
  cfg.feat_dim = j.at("feat_dim").get<int>();
  cfg.max_seq = j.at("max_seq").get<int>();
  cfg.tie_output = j.at("tie_output").get<bool>();
  cfg.ln_eps = j.at("ln_eps").get<double>();
  return cfg;
}

void save_checkpoint(const std::filesystem::path& path, const Weights& w) {
  static_assert(sizeof(double) == 8);
  auto refs = tensor_refs(w);
  json tensors = json::array();
  for (const auto& r : refs)
    tensors.push_back({{"name", r.name}, {"rows", r.rows}, {"cols", r.cols}});
  json header = {{"format", 1},
                 {"config", model_config_json(w.config)},
                 {"tensors", tensors}};

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string());
  out << kCheckpointMagic << '\n' << header.dump() << '\n';
  for (const auto& r : refs)
    out.write(reinterpret_cast<const char*>(r.data),
              static_cast<std::streamsize>(r.size() * sizeof(double)));
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

Weights load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::string magic, header_line;
  if (!std::getline(in, magic) || magic != kCheckpointMagic)
    throw std::runtime_error(path.string() + ": not a checkpoint file");
  if (!std::getline(in, header_line))
    throw std::runtime_error(path.string() + ": missing header");
  json header = json::parse(header_line);
  if (header.at("format").get<int>() != 1)
    throw std::runtime_error(path.string() + ": unsupported format version");

  ModelConfig cfg = model_config_from_json(header.at("config"));
  cfg.validate();
  // Allocate via a throwaway init, then overwrite every payload.
  Rng scratch(0);
  Weights w = Weights::init(cfg, scratch, 0.0);
  auto refs = tensor_refs(w);

  const auto& tensors = header.at("tensors");
  if (tensors.size() != refs.size())
    throw std::runtime_error(path.string() + ": tensor count mismatch");
  for (size_t i = 0; i < refs.size(); ++i) {
    const auto& t = tensors[i];
    if (t.at("name").get<std::string>() != refs[i].name ||
        t.at("rows").get<Eigen::Index>() != refs[i].rows ||
        t.at("cols").get<Eigen::Index>() != refs[i].cols)
      throw std::runtime_error(path.string() + ": tensor layout mismatch at " +
                               refs[i].name);
    in.read(reinterpret_cast<char*>(refs[i].data),
            static_cast<std::streamsize>(refs[i].size() * sizeof(double)));
    if (!in)
      throw std::runtime_error(path.string() + ": truncated payload at " +
                               refs[i].name);
  }
  return w;
}

uint64_t fnv1a(const void* data, size_t n, uint64_t seed) {
  const auto* p = static_cast<const unsigned char*>(data);
  uint64_t h = seed;
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

uint64_t file_fnv1a(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  uint64_t h = 0xcbf29ce484222325ull;
  char buf[1 << 16];
  while (in) {
    in.read(buf, sizeof(buf));
    h = fnv1a(buf, static_cast<size_t>(in.gcount()), h);
  }
  return h;
}

}  // namespace crosstrace
