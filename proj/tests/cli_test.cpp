#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest/doctest.h>

// End-to-end subprocess tests of the crosstrace binary. CROSSTRACE_BIN is
// injected by the build; fixtures live in a scratch workspace under the
// system temp directory. Cases are ordered: later ones reuse earlier outputs.

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

#include "crosstrace/checkpoint.hpp"
#include "crosstrace/config.hpp"

using namespace crosstrace;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const fs::path kWork = fs::temp_directory_path() / "crosstrace_cli_test";

int run(const std::string& args) {
  const std::string cmd = std::string(CROSSTRACE_BIN) + " " + args + " >> " +
                          (kWork / "cli.log").string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  REQUIRE(status != -1);
  REQUIRE(WIFEXITED(status));
  return WEXITSTATUS(status);
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

json tiny_config(const fs::path& out_dir) {
  return json{
      {"seed", 7},
      {"paths",
       {{"dataset", (out_dir / "dataset.jsonl").string()},
        {"checkpoint", (out_dir / "model.ckpt").string()},
        {"out_dir", out_dir.string()}}},
      {"model",
       {{"n_layers", 3}, {"d_model", 16}, {"n_heads", 2}, {"d_ff", 24},
        {"max_seq", 32}}},
      {"synth",
       {{"grid_rows", 3}, {"grid_cols", 3}, {"n_train", 60}, {"n_val", 16},
        {"n_eval", 16}}},
      {"train",
       {{"epochs", 2}, {"batch_size", 8}, {"eval_every", 4}}},
      {"trace", {{"sigma", 0.6}, {"max_samples", 8}}},
      {"inject", {{"k1", 1}, {"k2", 1}}},
      {"eval",
       {{"latency_reps", 3}, {"latency_decode_len", 4},
        {"caption_max_new", 8}}}};
}

fs::path write_json_file(const fs::path& p, const json& j) {
  std::ofstream(p) << j.dump(2) << '\n';
  return p;
}

int line_count(const fs::path& p) {
  std::ifstream in(p);
  int n = 0;
  std::string line;
  while (std::getline(in, line)) ++n;
  return n;
}

}  // namespace

TEST_CASE("argument and config validation exit with code 1") {
  fs::remove_all(kWork);
  fs::create_directories(kWork);
  CHECK(run("--help") == 0);
  CHECK(run("gen-data --help") == 0);
  CHECK(run("") == 1);                     // a subcommand is required
  CHECK(run("no-such-command") == 1);
  CHECK(run("gen-data") == 1);             // --config is required
  CHECK(run("gen-data --config /nonexistent/cfg.json") == 2);

  fs::path bad = write_json_file(kWork / "bad.json", json{{"seeed", 1}});
  CHECK(run("gen-data --config " + bad.string()) == 1);
  fs::path bad2 = write_json_file(kWork / "bad2.json",
                                  json{{"train", {{"batch_size", 0}}}});
  CHECK(run("gen-data --config " + bad2.string()) == 1);
}

TEST_CASE("gen-data writes once and honors --force") {
  fs::path dir = kWork / "main";
  fs::create_directories(dir);
  fs::path cfg = write_json_file(kWork / "cfg.json", tiny_config(dir));

  CHECK(run("gen-data --config " + cfg.string()) == 0);
  REQUIRE(fs::exists(dir / "dataset.jsonl"));
  CHECK(line_count(dir / "dataset.jsonl") == 1 + 60 + 16 + 16);
  const std::string first = slurp(dir / "dataset.jsonl");

  CHECK(run("gen-data --config " + cfg.string()) == 1);  // refuses overwrite
  CHECK(run("gen-data --config " + cfg.string() + " --force") == 0);
  CHECK(slurp(dir / "dataset.jsonl") == first);  // byte-identical regen

  // A different seed yields different bytes.
  CHECK(run("gen-data --config " + cfg.string() + " --force --seed 8") == 0);
  CHECK(slurp(dir / "dataset.jsonl") != first);
  CHECK(run("gen-data --config " + cfg.string() + " --force") == 0);
  CHECK(slurp(dir / "dataset.jsonl") == first);
}

TEST_CASE("train produces a deterministic checkpoint and metrics log") {
  fs::path dir = kWork / "main";
  fs::path cfg = kWork / "cfg.json";
  CHECK(run("train --config " + cfg.string()) == 0);
  REQUIRE(fs::exists(dir / "model.ckpt"));
  REQUIRE(fs::exists(dir / "metrics.jsonl"));
  const std::string ckpt = slurp(dir / "model.ckpt");
  const std::string log = slurp(dir / "metrics.jsonl");
  CHECK(line_count(dir / "metrics.jsonl") >= 1);
  std::istringstream log_in(log);
  for (std::string line; std::getline(log_in, line);) {
    json j = json::parse(line);
    CHECK(j.contains("step"));
    CHECK(j.contains("loss"));
    CHECK(j.contains("val_acc"));
  }

  CHECK(run("train --config " + cfg.string()) == 0);
  CHECK(slurp(dir / "model.ckpt") == ckpt);
  CHECK(slurp(dir / "metrics.jsonl") == log);

  // The checkpoint loads back into a model of the configured shape.
  Weights w = load_checkpoint(dir / "model.ckpt");
  CHECK(w.config.n_layers == 3);
  CHECK(w.config.d_model == 16);
  CHECK(w.config.vocab_size == Vocab::standard().size());
}

TEST_CASE("train without a dataset exits with code 2") {
  fs::path dir = kWork / "empty";
  fs::create_directories(dir);
  fs::path cfg = write_json_file(kWork / "cfg_empty.json", tiny_config(dir));
  CHECK(run("train --config " + cfg.string()) == 2);
}

TEST_CASE("calibrate-sigma fails with code 2 when the band is unreachable") {
  // An untrained checkpoint keeps P(yes) nearly flat under corruption, so
  // the calibration target cannot be hit.
  fs::path dir = kWork / "uncal";
  fs::create_directories(dir);
  json cfgj = tiny_config(dir);
  fs::path cfg = write_json_file(kWork / "cfg_uncal.json", cfgj);
  CHECK(run("gen-data --config " + cfg.string()) == 0);

  RunConfig rc = load_config(cfg);
  Rng rng(12345);
  Weights w = Weights::init(rc.model, rng);
  save_checkpoint(dir / "model.ckpt", w);
  const std::string before = slurp(cfg);
  CHECK(run("calibrate-sigma --config " + cfg.string()) == 2);
  CHECK(slurp(cfg) == before);  // config untouched on failure
}

TEST_CASE("trace writes the grid artifacts with the exact csv contract") {
  fs::path dir = kWork / "main";
  fs::path cfg = kWork / "cfg.json";
  CHECK(run("trace --config " + cfg.string()) == 0);

  REQUIRE(fs::exists(dir / "rr_grid.csv"));
  std::ifstream grid_in(dir / "rr_grid.csv");
  std::string header;
  std::getline(grid_in, header);
  CHECK(header == "component,layer,category,mean_rr,std,n_included,n_excluded");
  CHECK(line_count(dir / "rr_grid.csv") == 1 + 3 * 3 * 7);

  std::string line;
  bool saw_attn = false, saw_ffn = false, saw_hidden = false;
  while (std::getline(grid_in, line)) {
    saw_attn |= line.rfind("attn,", 0) == 0;
    saw_ffn |= line.rfind("ffn,", 0) == 0;
    saw_hidden |= line.rfind("hidden,", 0) == 0;
  }
  CHECK(saw_attn);
  CHECK(saw_ffn);
  CHECK(saw_hidden);

  REQUIRE(fs::exists(dir / "rr_grid_clamped.csv"));
  REQUIRE(fs::exists(dir / "rr_grid_meta.json"));
  json meta = json::parse(slurp(dir / "rr_grid_meta.json"));
  CHECK(meta["n_samples"] == 8);
  CHECK(meta["sigma"] == 0.6);
  CHECK(meta.contains("checkpoint_hash"));

  for (const char* name : {"heatmap_attn.svg", "heatmap_ffn.svg",
                           "heatmap_hidden.svg"}) {
    REQUIRE(fs::exists(dir / name));
    const std::string svg = slurp(dir / name);
    CHECK(svg.find("<svg") != std::string::npos);
  }
  REQUIRE(fs::exists(dir / "attention_profile.csv"));
  std::ifstream prof_in(dir / "attention_profile.csv");
  std::getline(prof_in, header);
  CHECK(header == "layer,mass_to_object_visual,mass_to_textual_object");
  CHECK(line_count(dir / "attention_profile.csv") == 1 + 3);
}

TEST_CASE("trace output is invariant under the worker count") {
  fs::path dir = kWork / "main";
  fs::path cfg = kWork / "cfg.json";
  const std::string one = slurp(dir / "rr_grid.csv");
  CHECK(run("trace --config " + cfg.string() + " --workers 3") == 0);
  CHECK(slurp(dir / "rr_grid.csv") == one);
}

TEST_CASE("inject-eval writes the metrics report and plan") {
  fs::path dir = kWork / "main";
  fs::path cfg = kWork / "cfg.json";
  CHECK(run("inject-eval --config " + cfg.string()) == 0);

  REQUIRE(fs::exists(dir / "metrics_report.json"));
  json report = json::parse(slurp(dir / "metrics_report.json"));
  for (const char* side : {"baseline", "injected"}) {
    REQUIRE(report.contains(side));
    for (const char* block : {"qa_clean", "qa_corrupted"}) {
      const json& m = report[side][block];
      for (const char* k : {"accuracy", "precision", "recall", "f1"}) {
        REQUIRE(m.contains(k));
        const double x = m[k].get<double>();
        CHECK(x >= 0.0);
        CHECK(x <= 1.0);
      }
    }
    REQUIRE(report[side].contains("chair"));
    CHECK(report[side]["chair"].contains("convention_note"));
  }
  CHECK(report["latency"]["baseline"]["tpot_ms"].get<double>() > 0.0);
  CHECK(report["n_samples"] == 16);

  REQUIRE(fs::exists(dir / "injection_plan.json"));
  json plan = json::parse(slurp(dir / "injection_plan.json"));
  CHECK(plan["k1"] == 1);
  CHECK(plan["k2"] == 1);
  CHECK(plan["component"] == "both");
  CHECK(plan["src_attn"].size() == 1);
  CHECK(plan["tgt_attn"].size() == 1);
}

TEST_CASE("zero-strength injection reproduces baseline metrics exactly") {
  fs::path dir = kWork / "zl";
  fs::create_directories(dir);
  json cfgj = tiny_config(dir);
  cfgj["inject"]["lambda_attn"] = 0.0;
  cfgj["inject"]["lambda_mlp"] = 0.0;
  // Reuse the trained artifacts from the main workspace.
  cfgj["paths"]["dataset"] = (kWork / "main" / "dataset.jsonl").string();
  cfgj["paths"]["checkpoint"] = (kWork / "main" / "model.ckpt").string();
  fs::path cfg = write_json_file(kWork / "cfg_zl.json", cfgj);

  CHECK(run("trace --config " + cfg.string()) == 0);
  CHECK(run("inject-eval --config " + cfg.string()) == 0);
  json report = json::parse(slurp(dir / "metrics_report.json"));
  CHECK(report["baseline"]["qa_clean"] == report["injected"]["qa_clean"]);
  CHECK(report["baseline"]["qa_corrupted"] ==
        report["injected"]["qa_corrupted"]);
  CHECK(report["baseline"]["chair"] == report["injected"]["chair"]);
}

TEST_CASE("inject-eval ablation flags override the config") {
  fs::path dir = kWork / "main";
  fs::path cfg = kWork / "cfg.json";
  CHECK(run("inject-eval --config " + cfg.string() +
            " --component attn --no-norm --no-rr-scaling"
            " --layer-range first2 --k1 1 --k2 1") == 0);
  json plan = json::parse(slurp(dir / "injection_plan.json"));
  CHECK(plan["component"] == "attn");
  CHECK(plan["use_normalization"] == false);
  CHECK(plan["use_rr_scaling"] == false);
  // With the pool clamped to layers {0, 1}, sets stay inside it.
  for (const auto& l : plan["src_attn"]) CHECK(l.get<int>() <= 1);
  for (const auto& l : plan["tgt_attn"]) CHECK(l.get<int>() <= 1);

  CHECK(run("inject-eval --config " + cfg.string() + " --k1 2 --k2 2" +
            " --layer-range first3") == 1);  // k1+k2 exceeds the pool
  CHECK(run("inject-eval --config " + cfg.string() +
            " --component sideways") == 1);
}
