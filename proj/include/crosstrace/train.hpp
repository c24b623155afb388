#pragma once

// Joint question-answering + captioning trainer: analytic backprop through
// the full network, Adam with bias correction, and a central-difference
// gradient checker for validating the backward pass.

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "crosstrace/model.hpp"
#include "crosstrace/synth.hpp"

namespace crosstrace {

/// One supervised sequence: image cells + text, with cross-entropy targets
/// at specific positions. The loss is the mean over the item's targets.
struct SupervisedItem {
  const Matrix* cells = nullptr;
  std::vector<int> text_ids;
  std::vector<std::pair<int, int>> targets;  // (position, token id)
};

/// QA item: predict yes/no at the question's final position.
SupervisedItem qa_item(const QASample& s, const Vocab& v);
/// Caption item: teacher-forced next-token prediction of the caption.
SupervisedItem caption_item(const QASample& s, const Vocab& v);

/// Backprop from a full logits gradient into `grads` (accumulating).
/// `cells` must be the matrix the sequence's visual prefix was embedded from.
void backward(const Weights& w, const MultimodalSequence& seq,
              const Matrix& cells, const ForwardCache& cache,
              const Matrix& dlogits, GradientSet& grads);

/// Mean cross-entropy over the item's targets. When `grads` is non-null,
/// accumulates d(scale * loss)/dtheta into it.
double item_loss_and_grads(const Weights& w, const SupervisedItem& item,
                           double scale, GradientSet* grads);

struct GradCheckResult {
  double max_rel_err = 0.0;
  int n_checked = 0;
  int n_skipped = 0;
  std::string worst_tensor;
};

/// Central-difference probe of `analytic` against `loss_fn`. Probes are
/// drawn uniformly over all parameters; near-zero pairs are skipped.
GradCheckResult grad_check(Weights& w,
                           const std::function<double(const Weights&)>& loss_fn,
                           const GradientSet& analytic, Rng& rng,
                           int n_probes = 64, double step = 1e-5,
                           double skip_below = 1e-6);

struct AdamState {
  GradientSet m, v;
  int64_t t = 0;
  static AdamState init(const Weights& w);
};

void adam_step(Weights& w, const GradientSet& g, AdamState& state, double lr,
               double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

struct TrainConfig {
  int epochs = 12;
  int batch_size = 16;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double qa_weight = 1.0;
  double caption_weight = 0.5;
  // 0.05 keeps init logits near-uniform (QA loss within a few percent of
  // ln vocab) while giving the visual pathway enough signal to train inside
  // the default epoch budget; at 0.02 it stays at chance ~3x longer.
  double init_std = 0.05;
  int eval_every = 25;          // steps between val-accuracy checks
  double early_stop_acc = 1.1;  // stop once val accuracy reaches this

  void validate() const;
};

struct MetricsPoint {
  int step = 0;
  double loss = 0.0;
  double val_acc = 0.0;
};

struct TrainResult {
  Weights best;  // weights at the best val-accuracy checkpoint
  double best_val_acc = 0.0;
  int best_step = 0;
  std::vector<MetricsPoint> log;
};

/// Fraction of samples whose argmax next token matches yes/no.
double validation_accuracy(const Weights& w,
                           const std::vector<const QASample*>& samples,
                           const Vocab& vocab);

/// Full training run. `rng` seeds init and batch order via independent
/// streams; identical inputs give byte-identical weights.
TrainResult train(const Dataset& ds, const ModelConfig& mcfg,
                  const TrainConfig& tcfg, Rng& rng,
                  std::ostream* progress = nullptr);

}  // namespace crosstrace
