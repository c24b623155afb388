#include "crosstrace/config.hpp"

#include <fstream>
#include <initializer_list>
#include <stdexcept>

#include "crosstrace/checkpoint.hpp"

namespace crosstrace {

using nlohmann::json;

namespace {

/// Pulls declared keys out of one JSON object and rejects the rest by name.
class Section {
 public:
  Section(const json& j, std::string prefix)
      : j_(j), prefix_(std::move(prefix)) {
    if (!j_.is_object())
      throw std::invalid_argument("config: '" + prefix_ +
                                  "' must be an object");
  }

  template <class T>
  void get(const char* key, T& out) {
    seen_.push_back(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      out = it->get<T>();
    } catch (const json::exception&) {
      throw std::invalid_argument("config: bad value type for '" + prefix_ +
                                  key + "'");
    }
  }

  const json* sub(const char* key) {
    seen_.push_back(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  void finish() const {
    for (const auto& [key, value] : j_.items()) {
      bool known = false;
      for (const auto& s : seen_)
        if (s == key) known = true;
      if (!known)
        throw std::invalid_argument("config: unknown key '" + prefix_ + key +
                                    "'");
    }
  }

 private:
  const json& j_;
  std::string prefix_;
  std::vector<std::string> seen_;
};

void apply_derived_model_fields(RunConfig& cfg) {
  cfg.model.vocab_size = Vocab::standard().size();
  cfg.model.patch_rows = cfg.synth.grid_rows;
  cfg.model.patch_cols = cfg.synth.grid_cols;
  cfg.model.feat_dim = cfg.synth.feat_dim;
}

}  // namespace

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("config: cannot open " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw std::invalid_argument("config: parse error in " + path.string() +
                                ": " + e.what());
  }

  RunConfig cfg;
  Section root(j, "");
  root.get("seed", cfg.seed);

  if (const json* p = root.sub("paths")) {
    Section s(*p, "paths.");
    s.get("dataset", cfg.paths.dataset);
    s.get("checkpoint", cfg.paths.checkpoint);
    s.get("out_dir", cfg.paths.out_dir);
    s.finish();
  }
  if (const json* p = root.sub("model")) {
    Section s(*p, "model.");
    s.get("n_layers", cfg.model.n_layers);
    s.get("d_model", cfg.model.d_model);
    s.get("n_heads", cfg.model.n_heads);
    s.get("d_ff", cfg.model.d_ff);
    s.get("max_seq", cfg.model.max_seq);
    s.get("tie_output", cfg.model.tie_output);
    s.get("ln_eps", cfg.model.ln_eps);
    s.finish();
  }
  if (const json* p = root.sub("synth")) {
    Section s(*p, "synth.");
    s.get("grid_rows", cfg.synth.grid_rows);
    s.get("grid_cols", cfg.synth.grid_cols);
    s.get("min_objects", cfg.synth.min_objects);
    s.get("max_objects", cfg.synth.max_objects);
    s.get("max_run", cfg.synth.max_run);
    s.get("p_negative", cfg.synth.p_negative);
    s.get("p_empty", cfg.synth.p_empty);
    s.get("early_textual", cfg.synth.early_textual);
    s.get("n_train", cfg.synth.n_train);
    s.get("n_val", cfg.synth.n_val);
    s.get("n_eval", cfg.synth.n_eval);
    s.finish();
  }
  if (const json* p = root.sub("train")) {
    Section s(*p, "train.");
    s.get("epochs", cfg.train.epochs);
    s.get("batch_size", cfg.train.batch_size);
    s.get("lr", cfg.train.lr);
    s.get("beta1", cfg.train.beta1);
    s.get("beta2", cfg.train.beta2);
    s.get("adam_eps", cfg.train.adam_eps);
    s.get("qa_weight", cfg.train.qa_weight);
    s.get("caption_weight", cfg.train.caption_weight);
    s.get("init_std", cfg.train.init_std);
    s.get("eval_every", cfg.train.eval_every);
    s.get("early_stop_acc", cfg.train.early_stop_acc);
    s.finish();
  }
  if (const json* p = root.sub("trace")) {
    Section s(*p, "trace.");
    s.get("sigma", cfg.trace.sigma);
    s.get("eps_d", cfg.trace.eps_d);
    s.get("max_samples", cfg.trace.max_samples);
    s.finish();
  }
  if (const json* p = root.sub("inject")) {
    Section s(*p, "inject.");
    s.get("k1", cfg.inject.k1);
    s.get("k2", cfg.inject.k2);
    s.get("lambda_attn", cfg.inject.lambda_attn);
    s.get("lambda_mlp", cfg.inject.lambda_mlp);
    s.get("use_rr_scaling", cfg.inject.use_rr_scaling);
    s.get("use_normalization", cfg.inject.use_normalization);
    s.get("component", cfg.inject.component);
    s.get("target_mode", cfg.inject.target_mode);
    s.get("layer_range", cfg.inject.layer_range);
    s.finish();
  }
  if (const json* p = root.sub("eval")) {
    Section s(*p, "eval.");
    s.get("max_samples", cfg.eval.max_samples);
    s.get("latency_reps", cfg.eval.latency_reps);
    s.get("latency_decode_len", cfg.eval.latency_decode_len);
    s.get("caption_max_new", cfg.eval.caption_max_new);
    s.finish();
  }
  root.finish();

  apply_derived_model_fields(cfg);
  cfg.model.validate();
  cfg.synth.validate();
  cfg.train.validate();
  if (cfg.trace.sigma < 0)
    throw std::invalid_argument("config: 'trace.sigma' must be >= 0");
  if (cfg.trace.eps_d <= 0)
    throw std::invalid_argument("config: 'trace.eps_d' must be > 0");
  if (cfg.trace.max_samples < 0)
    throw std::invalid_argument("config: 'trace.max_samples' must be >= 0");
  parse_inject_component(cfg.inject.component);
  parse_target_mode(cfg.inject.target_mode);
  parse_layer_range(cfg.inject.layer_range, cfg.model.n_layers);
  if (cfg.eval.latency_reps < 3)
    throw std::invalid_argument("config: 'eval.latency_reps' must be >= 3");
  if (cfg.eval.latency_decode_len < 2)
    throw std::invalid_argument(
        "config: 'eval.latency_decode_len' must be >= 2");
  if (cfg.eval.caption_max_new < 1)
    throw std::invalid_argument("config: 'eval.caption_max_new' must be >= 1");
  return cfg;
}

json config_json(const RunConfig& cfg) {
  return json{
      {"seed", cfg.seed},
      {"paths",
       {{"dataset", cfg.paths.dataset},
        {"checkpoint", cfg.paths.checkpoint},
        {"out_dir", cfg.paths.out_dir}}},
      {"model",
       {{"n_layers", cfg.model.n_layers},
        {"d_model", cfg.model.d_model},
        {"n_heads", cfg.model.n_heads},
        {"d_ff", cfg.model.d_ff},
        {"max_seq", cfg.model.max_seq},
        {"tie_output", cfg.model.tie_output},
        {"ln_eps", cfg.model.ln_eps}}},
      {"synth",
       {{"grid_rows", cfg.synth.grid_rows},
        {"grid_cols", cfg.synth.grid_cols},
        {"min_objects", cfg.synth.min_objects},
        {"max_objects", cfg.synth.max_objects},
        {"max_run", cfg.synth.max_run},
        {"p_negative", cfg.synth.p_negative},
        {"p_empty", cfg.synth.p_empty},
        {"early_textual", cfg.synth.early_textual},
        {"n_train", cfg.synth.n_train},
        {"n_val", cfg.synth.n_val},
        {"n_eval", cfg.synth.n_eval}}},
      {"train",
       {{"epochs", cfg.train.epochs},
        {"batch_size", cfg.train.batch_size},
        {"lr", cfg.train.lr},
        {"beta1", cfg.train.beta1},
        {"beta2", cfg.train.beta2},
        {"adam_eps", cfg.train.adam_eps},
        {"qa_weight", cfg.train.qa_weight},
        {"caption_weight", cfg.train.caption_weight},
        {"init_std", cfg.train.init_std},
        {"eval_every", cfg.train.eval_every},
        {"early_stop_acc", cfg.train.early_stop_acc}}},
      {"trace",
       {{"sigma", cfg.trace.sigma},
        {"eps_d", cfg.trace.eps_d},
        {"max_samples", cfg.trace.max_samples}}},
      {"inject",
       {{"k1", cfg.inject.k1},
        {"k2", cfg.inject.k2},
        {"lambda_attn", cfg.inject.lambda_attn},
        {"lambda_mlp", cfg.inject.lambda_mlp},
        {"use_rr_scaling", cfg.inject.use_rr_scaling},
        {"use_normalization", cfg.inject.use_normalization},
        {"component", cfg.inject.component},
        {"target_mode", cfg.inject.target_mode},
        {"layer_range", cfg.inject.layer_range}}},
      {"eval",
       {{"max_samples", cfg.eval.max_samples},
        {"latency_reps", cfg.eval.latency_reps},
        {"latency_decode_len", cfg.eval.latency_decode_len},
        {"caption_max_new", cfg.eval.caption_max_new}}}};
}

void save_config(const std::filesystem::path& path, const RunConfig& cfg) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("config: cannot write " + path.string());
  out << config_json(cfg).dump(2) << '\n';
}

std::string config_hash(const RunConfig& cfg) {
  const std::string dump = config_json(cfg).dump();
  const uint64_t h = fnv1a(dump.data(), dump.size());
  char buf[17];
  snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::vector<int> parse_layer_range(const std::string& range, int n_layers) {
  std::vector<int> out;
  auto fill = [&](int from, int to) {
    for (int l = from; l < to; ++l) out.push_back(l);
  };
  if (range == "all") {
    fill(0, n_layers);
    return out;
  }
  const bool first = range.rfind("first", 0) == 0;
  const bool last = range.rfind("last", 0) == 0;
  if (first || last) {
    const std::string num = range.substr(first ? 5 : 4);
    char* end = nullptr;
    const long n = std::strtol(num.c_str(), &end, 10);
    if (end && *end == '\0' && n > 0) {
      const int k = std::min(static_cast<int>(n), n_layers);
      if (first)
        fill(0, k);
      else
        fill(n_layers - k, n_layers);
      return out;
    }
  }
  throw std::invalid_argument(
      "config: 'inject.layer_range' must be all, first<N>, or last<N>; got '" +
      range + "'");
}

InjectComponent parse_inject_component(const std::string& name) {
  if (name == "both") return InjectComponent::Both;
  if (name == "attn") return InjectComponent::Attn;
  if (name == "mlp") return InjectComponent::Mlp;
  if (name == "hidden") return InjectComponent::Hidden;
  throw std::invalid_argument(
      "config: 'inject.component' must be both, attn, mlp, or hidden; got '" +
      name + "'");
}

TargetMode parse_target_mode(const std::string& name) {
  if (name == "rr_rank") return TargetMode::RrRank;
  if (name == "after_deepest_source") return TargetMode::AfterDeepestSource;
  throw std::invalid_argument(
      "config: 'inject.target_mode' must be rr_rank or after_deepest_source; "
      "got '" +
      name + "'");
}

}  // namespace crosstrace
