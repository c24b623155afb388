// crosstrace CLI: gen-data, train, calibrate-sigma, trace, inject-eval.
// Exit codes: 0 success, 1 validation error, 2 runtime error.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "crosstrace/checkpoint.hpp"
#include "crosstrace/config.hpp"
#include "crosstrace/eval.hpp"
#include "crosstrace/inject.hpp"
#include "crosstrace/parallel.hpp"
#include "crosstrace/report.hpp"
#include "crosstrace/synth.hpp"
#include "crosstrace/trace.hpp"
#include "crosstrace/train.hpp"

namespace fs = std::filesystem;
using namespace crosstrace;

namespace {

struct Common {
  std::string config_path;
  std::optional<uint64_t> seed;
  int workers = 0;
  bool force = false;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config_path, "run configuration file")
      ->required();
  cmd->add_option("--seed", c.seed, "override the config's root seed");
  cmd->add_option("--workers", c.workers,
                  "worker threads (default: CROSSTRACE_WORKERS or cores)");
  cmd->add_flag("--force", c.force, "overwrite existing outputs");
}

RunConfig load(const Common& c) {
  RunConfig cfg = load_config(c.config_path);
  if (c.seed) cfg.seed = *c.seed;
  return cfg;
}

Dataset load_dataset_checked(const RunConfig& cfg) {
  Dataset ds = read_dataset(cfg.paths.dataset);
  if (ds.config.grid_rows != cfg.synth.grid_rows ||
      ds.config.grid_cols != cfg.synth.grid_cols ||
      ds.config.feat_dim != cfg.synth.feat_dim)
    throw std::invalid_argument(
        "dataset grid does not match the config's synth section");
  return ds;
}

std::string hex_hash(uint64_t h) {
  char buf[17];
  snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::vector<const QASample*> capped(std::vector<const QASample*> v, int cap) {
  if (cap > 0 && static_cast<int>(v.size()) > cap) v.resize(cap);
  return v;
}

int run_gen_data(const Common& c) {
  RunConfig cfg = load(c);
  const fs::path out = cfg.paths.dataset;
  if (fs::exists(out) && !c.force)
    throw std::invalid_argument("dataset already exists at " + out.string() +
                                " (pass --force to overwrite)");
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  Rng rng = stage_rng(cfg.seed, Stage::DataGen);
  Dataset ds = gen_dataset(cfg.synth, rng);
  write_dataset(out, ds);
  std::cout << "wrote " << ds.samples.size() << " samples ("
            << ds.split("train").size() << " train, " << ds.split("val").size()
            << " val, " << ds.split("eval").size() << " eval) to "
            << out.string() << '\n';
  return 0;
}

int run_train(const Common& c) {
  RunConfig cfg = load(c);
  Dataset ds = load_dataset_checked(cfg);
  Rng rng = stage_rng(cfg.seed, Stage::Train);
  TrainResult res = train(ds, cfg.model, cfg.train, rng, &std::cout);

  const fs::path ckpt = cfg.paths.checkpoint;
  if (ckpt.has_parent_path()) fs::create_directories(ckpt.parent_path());
  save_checkpoint(ckpt, res.best);
  write_metrics_log(fs::path(cfg.paths.out_dir) / "metrics.jsonl", res.log);
  std::cout << "best val_acc " << res.best_val_acc << " at step "
            << res.best_step << "; checkpoint " << ckpt.string() << " (fnv1a "
            << hex_hash(file_fnv1a(ckpt)) << ")\n";
  return 0;
}

int run_calibrate_sigma(const Common& c) {
  RunConfig cfg = load(c);
  Dataset ds = load_dataset_checked(cfg);
  Weights w = load_checkpoint(cfg.paths.checkpoint);
  Rng rng = stage_rng(cfg.seed, Stage::SigmaCalibration);
  SigmaCalibration cal =
      calibrate_sigma(w, ds.split("val"), ds.vocab.yes, rng);
  cfg.trace.sigma = cal.sigma;
  save_config(c.config_path, cfg);
  std::cout << "sigma " << cal.sigma << " (mean P(yes) drop " << cal.drop
            << ", " << cal.iterations << " bisection iterations); written to "
            << c.config_path << '\n';
  return 0;
}

int run_trace(const Common& c) {
  RunConfig cfg = load(c);
  Dataset ds = load_dataset_checked(cfg);
  Weights w = load_checkpoint(cfg.paths.checkpoint);
  auto samples = capped(ds.split("eval"), cfg.trace.max_samples);

  SweepConfig sc;
  sc.sigma = cfg.trace.sigma;
  sc.eps_d = cfg.trace.eps_d;
  sc.yes_token = ds.vocab.yes;
  sc.workers = resolve_workers(c.workers);
  Rng rng = stage_rng(cfg.seed, Stage::TraceCorruption);
  RRGrid grid = sweep(w, samples, sc, rng);
  grid.seed = cfg.seed;
  grid.checkpoint_hash = hex_hash(file_fnv1a(cfg.paths.checkpoint));

  const fs::path out_dir = cfg.paths.out_dir;
  write_rr_grid_csv(out_dir / "rr_grid.csv", grid, false);
  write_rr_grid_csv(out_dir / "rr_grid_clamped.csv", grid, true);
  write_rr_grid_metadata(out_dir / "rr_grid_meta.json", grid);
  for (Site s : grid.sites)
    write_heatmap_svg(
        out_dir / (std::string("heatmap_") + site_name(s) + ".svg"), grid, s);
  AttentionProfile prof = attention_profile(w, samples);
  write_attention_profile_csv(out_dir / "attention_profile.csv", prof);

  RRVectors rrv = last_token_rr(grid);
  int best_attn = 0;
  for (int l = 1; l < rrv.attn.size(); ++l)
    if (rrv.attn[l] > rrv.attn[best_attn]) best_attn = l;
  std::cout << "swept " << samples.size() << " samples; "
            << grid.skipped_empty_patches
            << " empty-patch skips; top last-token attn layer " << best_attn
            << "; outputs in " << out_dir.string() << '\n';
  return 0;
}

int run_inject_eval(const Common& c, const RunConfig& cfg_in) {
  RunConfig cfg = cfg_in;
  Dataset ds = load_dataset_checked(cfg);
  Weights w = load_checkpoint(cfg.paths.checkpoint);
  const fs::path out_dir = cfg.paths.out_dir;

  RRGrid grid = read_rr_grid_csv(out_dir / "rr_grid.csv");
  RRVectors rrv = last_token_rr(grid);
  InjectionPlan plan = build_plan(
      rrv.attn, rrv.mlp, cfg.inject.k1, cfg.inject.k2, cfg.inject.lambda_attn,
      cfg.inject.lambda_mlp, parse_target_mode(cfg.inject.target_mode),
      parse_layer_range(cfg.inject.layer_range, cfg.model.n_layers),
      &rrv.hidden);
  plan.use_rr_scaling = cfg.inject.use_rr_scaling;
  plan.use_normalization = cfg.inject.use_normalization;
  plan.component = parse_inject_component(cfg.inject.component);
  HookSet hooks = make_injection_hooks(plan);

  auto samples = capped(ds.split("eval"), cfg.eval.max_samples);
  Rng eval_rng = stage_rng(cfg.seed, Stage::Eval);
  std::vector<Matrix> corrupted;
  corrupted.reserve(samples.size());
  for (size_t i = 0; i < samples.size(); ++i) {
    Rng crng = eval_rng.fork(i);
    corrupted.push_back(
        corrupt_image(samples[i]->image, cfg.trace.sigma, crng).cells);
  }

  auto eval_side = [&](const HookSet* h) {
    nlohmann::json j;
    j["qa_clean"] =
        binary_metrics_json(binary_metrics(qa_outcomes(w, samples, ds.vocab, h)));
    j["qa_corrupted"] = binary_metrics_json(
        binary_metrics(qa_outcomes(w, samples, ds.vocab, h, &corrupted)));
    j["chair"] = chair_json(chair(
        caption_judgments(w, samples, ds.vocab, h, cfg.eval.caption_max_new)));
    return j;
  };

  MultimodalSequence latency_seq =
      embed(w, samples.front()->image.cells, {ds.vocab.describe});
  LatencyResult lat_base = latency(w, latency_seq, nullptr,
                                   cfg.eval.latency_reps,
                                   cfg.eval.latency_decode_len);
  LatencyResult lat_inj = latency(w, latency_seq, &hooks,
                                  cfg.eval.latency_reps,
                                  cfg.eval.latency_decode_len);

  nlohmann::json report = {
      {"config_hash", config_hash(cfg)},
      {"checkpoint_hash", hex_hash(file_fnv1a(cfg.paths.checkpoint))},
      {"n_samples", samples.size()},
      {"sigma", cfg.trace.sigma},
      {"baseline", eval_side(nullptr)},
      {"injected", eval_side(&hooks)},
      {"latency",
       {{"baseline", latency_json(lat_base)},
        {"injected", latency_json(lat_inj)}}},
      {"plan", plan_json(plan)}};
  write_json(out_dir / "metrics_report.json", report);
  write_json(out_dir / "injection_plan.json", plan_json(plan));

  std::cout << "baseline corrupted acc "
            << report["baseline"]["qa_corrupted"]["accuracy"]
            << ", injected corrupted acc "
            << report["injected"]["qa_corrupted"]["accuracy"]
            << "; report in " << (out_dir / "metrics_report.json").string()
            << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"causal tracing and representation injection workbench"};
  app.require_subcommand(1);

  Common common;
  auto* gen = app.add_subcommand("gen-data", "generate the synthetic dataset");
  auto* tr = app.add_subcommand("train", "train a model on the dataset");
  auto* cal = app.add_subcommand("calibrate-sigma",
                                 "pick a corruption strength on the val split");
  auto* trace_cmd =
      app.add_subcommand("trace", "run the recovery-rate sweep and reports");
  auto* inj = app.add_subcommand("inject-eval",
                                 "evaluate injected decoding against baseline");
  for (CLI::App* cmd : {gen, tr, cal, trace_cmd, inj}) add_common(cmd, common);

  // Ablation axes on inject-eval; each overrides the config value.
  bool no_rr_scaling = false, no_norm = false;
  std::optional<std::string> component, layer_range;
  std::optional<int> k1, k2;
  inj->add_flag("--no-rr-scaling", no_rr_scaling,
                "use unit source weights instead of recovery rates");
  inj->add_flag("--no-norm", no_norm, "skip the norm-preserving rescale");
  inj->add_option("--component", component, "both|attn|mlp|hidden");
  inj->add_option("--layer-range", layer_range, "all|first<N>|last<N>");
  inj->add_option("--k1", k1, "source layer count");
  inj->add_option("--k2", k2, "target layer count");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (gen->parsed()) return run_gen_data(common);
    if (tr->parsed()) return run_train(common);
    if (cal->parsed()) return run_calibrate_sigma(common);
    if (trace_cmd->parsed()) return run_trace(common);
    if (inj->parsed()) {
      RunConfig cfg = load(common);
      if (no_rr_scaling) cfg.inject.use_rr_scaling = false;
      if (no_norm) cfg.inject.use_normalization = false;
      if (component) cfg.inject.component = *component;
      if (layer_range) cfg.inject.layer_range = *layer_range;
      if (k1) cfg.inject.k1 = *k1;
      if (k2) cfg.inject.k2 = *k2;
      return run_inject_eval(common, cfg);
    }
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
