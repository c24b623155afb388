#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest/doctest.h>

#include <cmath>
#include <stdexcept>
#include <vector>

#include "crosstrace/eval.hpp"
#include "crosstrace/rng.hpp"

using namespace crosstrace;

namespace {

SynthConfig small_synth() {
  SynthConfig cfg;
  cfg.grid_rows = 3;
  cfg.grid_cols = 3;
  cfg.n_train = 4;
  cfg.n_val = 4;
  cfg.n_eval = 12;
  return cfg;
}

ModelConfig small_model(const Vocab& v, const SynthConfig& s) {
  ModelConfig cfg;
  cfg.n_layers = 3;
  cfg.d_model = 16;
  cfg.n_heads = 2;
  cfg.d_ff = 24;
  cfg.vocab_size = v.size();
  cfg.patch_rows = s.grid_rows;
  cfg.patch_cols = s.grid_cols;
  cfg.feat_dim = s.feat_dim;
  cfg.max_seq = 48;
  return cfg;
}

GridImage image_with(const std::vector<int>& object_ids, int rows, int cols) {
  GridImage img;
  img.rows = rows;
  img.cols = cols;
  int cell = 0;
  for (int id : object_ids) {
    img.objects.push_back({id, {cell}});
    cell += 2;
  }
  img.cells = render_cells(img.objects, rows, cols, 7);
  return img;
}

}  // namespace

TEST_CASE("binary metrics arithmetic") {
  BinaryOutcomes o;
  o.tp = 3, o.fp = 1, o.tn = 4, o.fn = 2;
  BinaryMetrics m = binary_metrics(o);
  CHECK(m.accuracy == doctest::Approx(7.0 / 10.0));
  CHECK(m.precision == doctest::Approx(3.0 / 4.0));
  CHECK(m.recall == doctest::Approx(3.0 / 5.0));
  const double p = 3.0 / 4.0, r = 3.0 / 5.0;
  CHECK(m.f1 == doctest::Approx(2 * p * r / (p + r)));
}

TEST_CASE("binary metrics degenerate fallbacks") {
  BinaryOutcomes never_yes;
  never_yes.tn = 5, never_yes.fn = 5;
  BinaryMetrics m = binary_metrics(never_yes);
  CHECK(m.accuracy == 0.5);
  CHECK(m.precision == 0.0);  // no predicted positives
  CHECK(m.recall == 0.0);
  CHECK(m.f1 == 0.0);

  BinaryOutcomes empty;
  CHECK_THROWS_AS(binary_metrics(empty), std::invalid_argument);
}

TEST_CASE("object extraction dedups and sorts") {
  Vocab v = Vocab::standard();
  CHECK(extract_objects({}, v).empty());
  CHECK(extract_objects({v.a_, v.period, v.yes}, v).empty());
  std::vector<int> tokens = {v.a_, 3, v.period, v.a_, 1, v.period, v.a_, 3,
                             v.period};
  CHECK(extract_objects(tokens, v) == std::vector<int>{1, 3});
}

TEST_CASE("caption judgment matches the worked example") {
  // Caption mentions dog, cat, car; the image holds dog and car; the two
  // sentences split the mentions so exactly one sentence hallucinates.
  Vocab v = Vocab::standard();
  const int dog = v.id("dog"), cat = v.id("cat"), car = v.id("car");
  GridImage img = image_with({dog, car}, 3, 3);
  std::vector<int> caption = {v.a_, dog,    v.period, v.a_,    cat,
                              v.a_, car,    v.period};
  CaptionJudgment j = judge_caption(caption, img, v);
  CHECK(j.mentioned == std::vector<int>{dog, cat, car});
  CHECK(j.ground_truth == std::vector<int>{dog, car});
  CHECK(j.hallucinated == std::vector<int>{cat});
  CHECK(j.n_sentences == 2);
  CHECK(j.n_hallucinated_sentences == 1);

  ChairResult res = chair({j});
  REQUIRE(res.c_s_defined);
  REQUIRE(res.c_i_defined);
  CHECK(res.c_s == doctest::Approx(1.0 / 3.0));
  CHECK(res.c_i == doctest::Approx(1.0 / 2.0));
}

TEST_CASE("mentioned objects are deduplicated id sets") {
  Vocab v = Vocab::standard();
  const int dog = v.id("dog"), cat = v.id("cat");
  GridImage img = image_with({dog}, 3, 3);
  std::vector<int> caption = {v.a_, cat, v.period, v.a_, dog, v.period,
                              v.a_, cat, v.period};
  CaptionJudgment j = judge_caption(caption, img, v);
  CHECK(j.mentioned == std::vector<int>{dog, cat});  // sorted ids {0, 1}
  CHECK(j.hallucinated == std::vector<int>{cat});
  CHECK(j.n_sentences == 3);
  CHECK(j.n_hallucinated_sentences == 2);
}

TEST_CASE("an unterminated trailing run counts as a sentence") {
  Vocab v = Vocab::standard();
  const int dog = v.id("dog"), cat = v.id("cat");
  GridImage img = image_with({dog}, 3, 3);
  std::vector<int> caption = {v.a_, dog, v.period, v.a_, cat};
  CaptionJudgment j = judge_caption(caption, img, v);
  CHECK(j.n_sentences == 2);
  CHECK(j.n_hallucinated_sentences == 1);

  // A stop token alone does not open a new sentence.
  std::vector<int> terminated = {v.a_, dog, v.period, v.stop};
  CaptionJudgment j2 = judge_caption(terminated, img, v);
  CHECK(j2.n_sentences == 1);
  CHECK(j2.n_hallucinated_sentences == 0);

  std::vector<int> empty_caption = {};
  CaptionJudgment j3 = judge_caption(empty_caption, img, v);
  CHECK(j3.n_sentences == 0);
  CHECK(j3.mentioned.empty());
}

TEST_CASE("chair pools counts across the corpus") {
  Vocab v = Vocab::standard();
  const int dog = v.id("dog"), cat = v.id("cat"), car = v.id("car");
  GridImage with_dog = image_with({dog}, 3, 3);
  GridImage with_cat = image_with({cat}, 3, 3);

  std::vector<CaptionJudgment> js;
  js.push_back(judge_caption({v.a_, dog, v.period}, with_dog, v));
  js.push_back(judge_caption({v.a_, car, v.period, v.a_, cat, v.period},
                             with_cat, v));
  ChairResult res = chair(js);
  // Pooled: mentioned 3 (dog, car, cat), hallucinated 1 (car);
  // sentences 3, hallucinated sentences 1.
  CHECK(res.total_mentioned == 3);
  CHECK(res.total_hallucinated == 1);
  CHECK(res.total_sentences == 3);
  CHECK(res.hallucinated_sentences == 1);
  CHECK(res.c_s == doctest::Approx(1.0 / 3.0));
  CHECK(res.c_i == doctest::Approx(1.0 / 3.0));

  // Pooling, not averaging of per-caption ratios: the two-caption mean of
  // ratios would be (0 + 1/2) / 2 = 1/4 for objects, pooled is 1/3.
  CHECK(res.c_s != doctest::Approx(0.25));
}

TEST_CASE("chair flags undefined ratios instead of inventing zeros") {
  Vocab v = Vocab::standard();
  GridImage img = image_with({v.id("dog")}, 3, 3);
  CaptionJudgment none = judge_caption({}, img, v);
  ChairResult res = chair({none});
  CHECK_FALSE(res.c_s_defined);
  CHECK_FALSE(res.c_i_defined);

  CaptionJudgment no_objects = judge_caption({v.nothing, v.period}, img, v);
  ChairResult res2 = chair({no_objects});
  CHECK_FALSE(res2.c_s_defined);  // nothing mentioned
  CHECK(res2.c_i_defined);        // but one sentence exists
  CHECK(res2.c_i == 0.0);
}

TEST_CASE("adding a hallucination never lowers the pooled ratios") {
  Vocab v = Vocab::standard();
  const int dog = v.id("dog"), cat = v.id("cat");
  GridImage img = image_with({dog}, 3, 3);
  std::vector<CaptionJudgment> base = {
      judge_caption({v.a_, dog, v.period}, img, v),
      judge_caption({v.a_, dog, v.period}, img, v)};
  std::vector<CaptionJudgment> worse = base;
  worse[1] = judge_caption({v.a_, dog, v.period, v.a_, cat, v.period}, img, v);
  ChairResult r0 = chair(base);
  ChairResult r1 = chair(worse);
  CHECK(r1.c_s >= r0.c_s);
  CHECK(r1.c_i >= r0.c_i);
  CHECK(r1.c_s > 0.0);
}

TEST_CASE("qa outcomes count four quadrants against the gold answers") {
  Vocab v = Vocab::standard();
  SynthConfig scfg = small_synth();
  Rng rng(7);
  Weights w = Weights::init(small_model(v, scfg), rng);
  Rng drng(8);
  Dataset ds = gen_dataset(scfg, drng);
  std::vector<const QASample*> samples = ds.split("eval");

  BinaryOutcomes o = qa_outcomes(w, samples, v, nullptr);
  CHECK(o.total() == static_cast<int>(samples.size()));

  // Oracle recount from per-sample predictions.
  BinaryOutcomes want;
  for (const QASample* s : samples) {
    const bool yes = predicted_yes(w, s->image.cells, s->question_ids, v,
                                   nullptr);
    if (s->answer_yes)
      yes ? ++want.tp : ++want.fn;
    else
      yes ? ++want.fp : ++want.tn;
  }
  CHECK(o.tp == want.tp);
  CHECK(o.fp == want.fp);
  CHECK(o.tn == want.tn);
  CHECK(o.fn == want.fn);
}

TEST_CASE("cells override swaps the images under evaluation") {
  Vocab v = Vocab::standard();
  SynthConfig scfg = small_synth();
  Rng rng(17);
  Weights w = Weights::init(small_model(v, scfg), rng);
  Rng drng(18);
  Dataset ds = gen_dataset(scfg, drng);
  std::vector<const QASample*> samples = ds.split("eval");
  samples.resize(4);

  std::vector<Matrix> zeros;
  for (const QASample* s : samples)
    zeros.push_back(Matrix::Zero(s->image.cells.rows(), s->image.cells.cols()));
  BinaryOutcomes o = qa_outcomes(w, samples, v, nullptr, &zeros);

  BinaryOutcomes want;
  for (size_t i = 0; i < samples.size(); ++i) {
    const bool yes =
        predicted_yes(w, zeros[i], samples[i]->question_ids, v, nullptr);
    if (samples[i]->answer_yes)
      yes ? ++want.tp : ++want.fn;
    else
      yes ? ++want.fp : ++want.tn;
  }
  CHECK(o.tp == want.tp);
  CHECK(o.fn == want.fn);

  std::vector<Matrix> short_list(2);
  CHECK_THROWS_AS(qa_outcomes(w, samples, v, nullptr, &short_list),
                  std::invalid_argument);
}

TEST_CASE("generated captions strip the stop token and respect max_new") {
  Vocab v = Vocab::standard();
  SynthConfig scfg = small_synth();
  Rng rng(27);
  Weights w = Weights::init(small_model(v, scfg), rng);
  Rng drng(28);
  QASample s = gen_sample(scfg, v, drng, "eval");

  std::vector<int> cap = generate_caption(w, s.image.cells, v, nullptr, 6);
  CHECK(cap.size() <= 6);
  for (int t : cap) CHECK(t != v.stop);

  std::vector<const QASample*> samples = {&s};
  std::vector<CaptionJudgment> js =
      caption_judgments(w, samples, v, nullptr, 6);
  REQUIRE(js.size() == 1);
  std::vector<int> gt;
  for (const auto& obj : s.image.objects) gt.push_back(obj.object_id);
  std::sort(gt.begin(), gt.end());
  CHECK(js[0].ground_truth == gt);
}

TEST_CASE("ground-truth captions judge as hallucination-free") {
  Vocab v = Vocab::standard();
  SynthConfig scfg = small_synth();
  Rng rng(37);
  for (int i = 0; i < 200; ++i) {
    Rng t = rng.fork(i);
    GridImage img = gen_image(scfg, t);
    std::vector<int> cap = make_caption(img, v);
    CaptionJudgment j = judge_caption(cap, img, v);
    CHECK(j.hallucinated.empty());
    CHECK(j.n_hallucinated_sentences == 0);
    std::vector<int> gt;
    for (const auto& obj : img.objects) gt.push_back(obj.object_id);
    std::sort(gt.begin(), gt.end());
    CHECK(j.mentioned.size() == gt.size());
  }
}

TEST_CASE("latency reports positive medians and validates its arguments") {
  Vocab v = Vocab::standard();
  SynthConfig scfg = small_synth();
  Rng rng(47);
  Weights w = Weights::init(small_model(v, scfg), rng);
  Rng drng(48);
  QASample s = gen_sample(scfg, v, drng, "eval");
  MultimodalSequence seq = embed_qa(w, s);

  LatencyResult lat = latency(w, seq, nullptr, 5, 4);
  CHECK(lat.reps == 5);
  CHECK(lat.decode_len == 4);
  CHECK(lat.ttft_ms > 0.0);
  CHECK(lat.tpot_ms > 0.0);

  CHECK_THROWS_AS(latency(w, seq, nullptr, 2, 4), std::invalid_argument);
  CHECK_THROWS_AS(latency(w, seq, nullptr, 5, 1), std::invalid_argument);
}
