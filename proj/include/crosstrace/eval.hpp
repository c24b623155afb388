#pragma once

// Task metrics over the toy corpus: yes/no QA accuracy and F1, object
// hallucination ratios over generated captions, and decode latency.

#include <vector>

#include "crosstrace/model.hpp"
#include "crosstrace/synth.hpp"

namespace crosstrace {

struct BinaryOutcomes {
  int tp = 0, fp = 0, tn = 0, fn = 0;  // YES is the positive class
  int total() const { return tp + fp + tn + fn; }
};

struct BinaryMetrics {
  double accuracy = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

/// Standard definitions; precision/recall/f1 fall back to 0 when undefined.
BinaryMetrics binary_metrics(const BinaryOutcomes& o);

/// Sorted, deduplicated object ids mentioned in a token sequence.
std::vector<int> extract_objects(const std::vector<int>& tokens,
                                 const Vocab& vocab);

struct CaptionJudgment {
  std::vector<int> mentioned;     // objects in the generated caption
  std::vector<int> ground_truth;  // objects actually in the image
  std::vector<int> hallucinated;  // mentioned \ ground_truth
  int n_sentences = 0;
  int n_hallucinated_sentences = 0;
};

/// Splits on the period token (a trailing unterminated run counts as a
/// sentence); a sentence is hallucinated if it names an absent object.
CaptionJudgment judge_caption(const std::vector<int>& generated,
                              const GridImage& image, const Vocab& vocab);

struct ChairResult {
  double c_s = 0.0;  // hallucinated objects / all mentioned objects
  double c_i = 0.0;  // sentences with hallucinations / all sentences
  bool c_s_defined = false;
  bool c_i_defined = false;
  int total_mentioned = 0;
  int total_hallucinated = 0;
  int total_sentences = 0;
  int hallucinated_sentences = 0;
};

/// Corpus-pooled ratios. Note the role assignment: c_s divides objects and
/// c_i divides sentences; much of the hallucination literature attaches
/// these names the other way around. Downstream reports carry this remark.
ChairResult chair(const std::vector<CaptionJudgment>& judgments);

/// Greedy yes/no answer for one image+question. Any token other than "yes"
/// counts as a NO prediction.
bool predicted_yes(const Weights& w, const Matrix& cells,
                   const std::vector<int>& question_ids, const Vocab& vocab,
                   const HookSet* hooks);

/// QA outcomes over samples. `cells_override` (parallel to samples, may be
/// null) substitutes e.g. corrupted images.
BinaryOutcomes qa_outcomes(const Weights& w,
                           const std::vector<const QASample*>& samples,
                           const Vocab& vocab, const HookSet* hooks,
                           const std::vector<Matrix>* cells_override = nullptr);

/// Caption for one image from the "describe" prompt, stop token stripped.
std::vector<int> generate_caption(const Weights& w, const Matrix& cells,
                                  const Vocab& vocab, const HookSet* hooks,
                                  int max_new);

std::vector<CaptionJudgment> caption_judgments(
    const Weights& w, const std::vector<const QASample*>& samples,
    const Vocab& vocab, const HookSet* hooks, int max_new,
    const std::vector<Matrix>* cells_override = nullptr);

struct LatencyResult {
  double ttft_ms = 0.0;  // median time to the first generated token
  double tpot_ms = 0.0;  // median per-token time over the remaining tokens
  int reps = 0;
  int decode_len = 0;
};

/// Wall-clock decode timing over `reps` repetitions of a fixed-length
/// greedy decode (no stop token).
LatencyResult latency(const Weights& w, const MultimodalSequence& seq,
                      const HookSet* hooks, int reps, int decode_len);

}  // namespace crosstrace
