#include "crosstrace/eval.hpp"

#include <algorithm>
#include <chrono>
#include <stdexcept>

namespace crosstrace {

namespace {

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

BinaryMetrics binary_metrics(const BinaryOutcomes& o) {
  if (o.total() <= 0) throw std::invalid_argument("binary_metrics: empty");
  if (o.tp < 0 || o.fp < 0 || o.tn < 0 || o.fn < 0)
    throw std::invalid_argument("binary_metrics: negative count");
  BinaryMetrics m;
  m.accuracy = static_cast<double>(o.tp + o.tn) / o.total();
  m.precision = (o.tp + o.fp) > 0
                    ? static_cast<double>(o.tp) / (o.tp + o.fp)
                    : 0.0;
  m.recall =
      (o.tp + o.fn) > 0 ? static_cast<double>(o.tp) / (o.tp + o.fn) : 0.0;
  m.f1 = (m.precision + m.recall) > 0
             ? 2.0 * m.precision * m.recall / (m.precision + m.recall)
             : 0.0;
  return m;
}

std::vector<int> extract_objects(const std::vector<int>& tokens,
                                 const Vocab& vocab) {
  std::vector<int> out;
  for (int t : tokens)
    if (t >= 0 && t < vocab.n_objects) out.push_back(t);
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

CaptionJudgment judge_caption(const std::vector<int>& generated,
                              const GridImage& image, const Vocab& vocab) {
  CaptionJudgment j;
  j.mentioned = extract_objects(generated, vocab);
  for (const auto& o : image.objects) j.ground_truth.push_back(o.object_id);
  std::sort(j.ground_truth.begin(), j.ground_truth.end());
  j.ground_truth.erase(
      std::unique(j.ground_truth.begin(), j.ground_truth.end()),
      j.ground_truth.end());
  std::set_difference(j.mentioned.begin(), j.mentioned.end(),
                      j.ground_truth.begin(), j.ground_truth.end(),
                      std::back_inserter(j.hallucinated));

  bool in_sentence = false;
  bool sentence_bad = false;
  auto close_sentence = [&] {
    j.n_sentences += 1;
    if (sentence_bad) j.n_hallucinated_sentences += 1;
    in_sentence = false;
    sentence_bad = false;
  };
  for (int t : generated) {
    if (t == vocab.stop) continue;
    if (t == vocab.period) {
      close_sentence();  // "." alone still terminates a (possibly empty) run
      continue;
    }
    in_sentence = true;
    if (t >= 0 && t < vocab.n_objects &&
        !std::binary_search(j.ground_truth.begin(), j.ground_truth.end(), t))
      sentence_bad = true;
  }
  if (in_sentence) close_sentence();
  return j;
}

ChairResult chair(const std::vector<CaptionJudgment>& judgments) {
  if (judgments.empty()) throw std::invalid_argument("chair: no judgments");
  ChairResult r;
  for (const auto& j : judgments) {
    r.total_mentioned += static_cast<int>(j.mentioned.size());
    r.total_hallucinated += static_cast<int>(j.hallucinated.size());
    r.total_sentences += j.n_sentences;
    r.hallucinated_sentences += j.n_hallucinated_sentences;
  }
  if (r.total_mentioned > 0) {
    r.c_s = static_cast<double>(r.total_hallucinated) / r.total_mentioned;
    r.c_s_defined = true;
  }
  if (r.total_sentences > 0) {
    r.c_i = static_cast<double>(r.hallucinated_sentences) / r.total_sentences;
    r.c_i_defined = true;
  }
  return r;
}

bool predicted_yes(const Weights& w, const Matrix& cells,
                   const std::vector<int>& question_ids, const Vocab& vocab,
                   const HookSet* hooks) {
  MultimodalSequence seq = embed(w, cells, question_ids);
  const int tok = greedy_decode(w, seq, hooks, 1, vocab.stop)[0];
  return tok == vocab.yes;
}

BinaryOutcomes qa_outcomes(const Weights& w,
                           const std::vector<const QASample*>& samples,
                           const Vocab& vocab, const HookSet* hooks,
                           const std::vector<Matrix>* cells_override) {
  if (cells_override && cells_override->size() != samples.size())
    throw std::invalid_argument("qa_outcomes: override size mismatch");
  BinaryOutcomes o;
  for (size_t i = 0; i < samples.size(); ++i) {
    const QASample& s = *samples[i];
    const Matrix& cells =
        cells_override ? (*cells_override)[i] : s.image.cells;
    const bool yes = predicted_yes(w, cells, s.question_ids, vocab, hooks);
    if (s.answer_yes)
      yes ? ++o.tp : ++o.fn;
    else
      yes ? ++o.fp : ++o.tn;
  }
  return o;
}

std::vector<int> generate_caption(const Weights& w, const Matrix& cells,
                                  const Vocab& vocab, const HookSet* hooks,
                                  int max_new) {
  MultimodalSequence seq = embed(w, cells, {vocab.describe});
  std::vector<int> out = greedy_decode(w, seq, hooks, max_new, vocab.stop);
  if (!out.empty() && out.back() == vocab.stop) out.pop_back();
  return out;
}

std::vector<CaptionJudgment> caption_judgments(
    const Weights& w, const std::vector<const QASample*>& samples,
    const Vocab& vocab, const HookSet* hooks, int max_new,
    const std::vector<Matrix>* cells_override) {
  if (cells_override && cells_override->size() != samples.size())
    throw std::invalid_argument("caption_judgments: override size mismatch");
  std::vector<CaptionJudgment> out;
  out.reserve(samples.size());
  for (size_t i = 0; i < samples.size(); ++i) {
    const QASample& s = *samples[i];
    const Matrix& cells =
        cells_override ? (*cells_override)[i] : s.image.cells;
    std::vector<int> caption =
        generate_caption(w, cells, vocab, hooks, max_new);
    out.push_back(judge_caption(caption, s.image, vocab));
  }
  return out;
}

LatencyResult latency(const Weights& w, const MultimodalSequence& seq,
                      const HookSet* hooks, int reps, int decode_len) {
  if (reps < 3) throw std::invalid_argument("latency: reps must be >= 3");
  if (decode_len < 2)
    throw std::invalid_argument("latency: decode_len must be >= 2");
  using clock = std::chrono::steady_clock;
  std::vector<double> ttft, tpot;
  for (int r = 0; r < reps; ++r) {
    MultimodalSequence work = seq;
    const auto t0 = clock::now();
    decode_step(w, work, hooks);
    const auto t1 = clock::now();
    for (int s = 1; s < decode_len; ++s) decode_step(w, work, hooks);
    const auto t2 = clock::now();
    ttft.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
    tpot.push_back(std::chrono::duration<double, std::milli>(t2 - t1).count() /
                   (decode_len - 1));
  }
  LatencyResult res;
  res.ttft_ms = median(ttft);
  res.tpot_ms = median(tpot);
  res.reps = reps;
  res.decode_len = decode_len;
  return res;
}

}  // namespace crosstrace
