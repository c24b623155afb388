#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest/doctest.h>

#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>

#include "crosstrace/config.hpp"

using namespace crosstrace;
namespace fs = std::filesystem;

namespace {

fs::path write_config(const std::string& name, const std::string& body) {
  fs::path dir = fs::temp_directory_path() / "crosstrace_config_test";
  fs::create_directories(dir);
  fs::path p = dir / name;
  std::ofstream(p) << body;
  return p;
}

}  // namespace

TEST_CASE("an empty object loads every default") {
  RunConfig cfg = load_config(write_config("empty.json", "{}"));
  CHECK(cfg.seed == 1);
  CHECK(cfg.model.n_layers == 8);
  CHECK(cfg.model.d_model == 64);
  CHECK(cfg.synth.grid_rows == 6);
  CHECK(cfg.train.epochs == 12);
  CHECK(cfg.trace.sigma == 0.5);
  CHECK(cfg.inject.k1 == 3);
  CHECK(cfg.inject.k2 == 5);
  CHECK(cfg.inject.lambda_attn == 0.26);
  CHECK(cfg.inject.lambda_mlp == 0.16);
  CHECK(cfg.eval.latency_reps == 10);
  // Derived fields come from the fixed vocab and the synth grid.
  CHECK(cfg.model.vocab_size == Vocab::standard().size());
  CHECK(cfg.model.patch_rows == cfg.synth.grid_rows);
  CHECK(cfg.model.patch_cols == cfg.synth.grid_cols);
  CHECK(cfg.model.feat_dim == cfg.synth.feat_dim);
}

TEST_CASE("explicit values override defaults") {
  RunConfig cfg = load_config(write_config("set.json", R"({
    "seed": 17,
    "model": {"n_layers": 4, "d_model": 32, "n_heads": 2, "d_ff": 64},
    "synth": {"grid_rows": 4, "grid_cols": 5, "n_train": 100},
    "train": {"epochs": 2, "lr": 0.01, "caption_weight": 0.0},
    "trace": {"sigma": 0.9, "max_samples": 10},
    "inject": {"k1": 1, "k2": 2, "component": "attn"},
    "eval": {"latency_reps": 12},
    "paths": {"out_dir": "elsewhere"}
  })"));
  CHECK(cfg.seed == 17);
  CHECK(cfg.model.n_layers == 4);
  CHECK(cfg.model.patch_rows == 4);
  CHECK(cfg.model.patch_cols == 5);
  CHECK(cfg.synth.n_train == 100);
  CHECK(cfg.train.lr == 0.01);
  CHECK(cfg.train.caption_weight == 0.0);
  CHECK(cfg.trace.sigma == 0.9);
  CHECK(cfg.inject.component == "attn");
  CHECK(cfg.eval.latency_reps == 12);
  CHECK(cfg.paths.out_dir == "elsewhere");
}

TEST_CASE("unknown keys are rejected by name") {
  fs::path p = write_config("unknown.json", R"({"train": {"foo": 3}})");
  try {
    load_config(p);
    FAIL("expected a rejection");
  } catch (const std::invalid_argument& e) {
    const std::string msg = e.what();
    CHECK(msg.find("train.foo") != std::string::npos);
  }

  fs::path top = write_config("unknown_top.json", R"({"seeed": 1})");
  CHECK_THROWS_AS(load_config(top), std::invalid_argument);
}

TEST_CASE("derived model fields cannot be configured") {
  fs::path p =
      write_config("derived.json", R"({"model": {"vocab_size": 99}})");
  CHECK_THROWS_AS(load_config(p), std::invalid_argument);
  fs::path p2 =
      write_config("derived2.json", R"({"model": {"patch_rows": 3}})");
  CHECK_THROWS_AS(load_config(p2), std::invalid_argument);
}

TEST_CASE("type mismatches are rejected") {
  fs::path p = write_config("badtype.json", R"({"train": {"epochs": "ten"}})");
  CHECK_THROWS_AS(load_config(p), std::invalid_argument);
  fs::path p2 = write_config("badjson.json", "{nope");
  CHECK_THROWS_AS(load_config(p2), std::invalid_argument);
  CHECK_THROWS_AS(load_config(fs::temp_directory_path() /
                              "crosstrace_config_test" / "missing.json"),
                  std::runtime_error);
}

TEST_CASE("semantic validation runs after parsing") {
  fs::path p = write_config("sem.json", R"({"model": {"n_layers": 1}})");
  CHECK_THROWS_AS(load_config(p), std::invalid_argument);
  fs::path p2 = write_config("sem2.json", R"({"train": {"batch_size": 0}})");
  CHECK_THROWS_AS(load_config(p2), std::invalid_argument);
  fs::path p3 =
      write_config("sem3.json", R"({"inject": {"component": "sideways"}})");
  CHECK_THROWS_AS(load_config(p3), std::invalid_argument);
  fs::path p4 =
      write_config("sem4.json", R"({"inject": {"layer_range": "middle"}})");
  CHECK_THROWS_AS(load_config(p4), std::invalid_argument);
}

TEST_CASE("save and reload round-trips the configuration") {
  RunConfig cfg;
  cfg.seed = 99;
  cfg.model.n_layers = 5;
  cfg.model.vocab_size = Vocab::standard().size();
  cfg.synth.n_train = 50;
  cfg.train.lr = 0.005;
  cfg.trace.sigma = 0.77;
  cfg.inject.layer_range = "last4";
  fs::path p = fs::temp_directory_path() / "crosstrace_config_test" /
               "roundtrip.json";
  save_config(p, cfg);
  RunConfig back = load_config(p);
  CHECK(config_json(back) == config_json(cfg));
  CHECK(config_hash(back) == config_hash(cfg));

  RunConfig other = cfg;
  other.trace.sigma = 0.78;
  CHECK(config_hash(other) != config_hash(cfg));
}

TEST_CASE("layer range parsing") {
  CHECK(parse_layer_range("all", 4) == std::vector<int>{0, 1, 2, 3});
  CHECK(parse_layer_range("first2", 4) == std::vector<int>{0, 1});
  CHECK(parse_layer_range("last3", 8) == std::vector<int>{5, 6, 7});
  // Requests larger than the model clamp to the full range.
  CHECK(parse_layer_range("first9", 4) == std::vector<int>{0, 1, 2, 3});
  CHECK(parse_layer_range("last9", 4) == std::vector<int>{0, 1, 2, 3});
  CHECK_THROWS_AS(parse_layer_range("middle", 4), std::invalid_argument);
  CHECK_THROWS_AS(parse_layer_range("first0", 4), std::invalid_argument);
  CHECK_THROWS_AS(parse_layer_range("firstx", 4), std::invalid_argument);
  CHECK_THROWS_AS(parse_layer_range("", 4), std::invalid_argument);
}

TEST_CASE("component and target mode parsing") {
  CHECK(parse_inject_component("both") == InjectComponent::Both);
  CHECK(parse_inject_component("attn") == InjectComponent::Attn);
  CHECK(parse_inject_component("mlp") == InjectComponent::Mlp);
  CHECK(parse_inject_component("hidden") == InjectComponent::Hidden);
  CHECK_THROWS_AS(parse_inject_component("ffn"), std::invalid_argument);
  CHECK(parse_target_mode("rr_rank") == TargetMode::RrRank);
  CHECK(parse_target_mode("after_deepest_source") ==
        TargetMode::AfterDeepestSource);
  CHECK_THROWS_AS(parse_target_mode("nearest"), std::invalid_argument);
}

TEST_CASE("stage rng streams are stable and distinct") {
  Rng a = stage_rng(42, Stage::Train);
  Rng b = stage_rng(42, Stage::Train);
  Rng c = stage_rng(42, Stage::Eval);
  const uint64_t av = a.next_u64();
  CHECK(av == b.next_u64());
  CHECK(av != c.next_u64());
}
