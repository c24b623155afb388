#pragma once

// Injection engine: rank layers by recovery rate, pick source and target
// sets, and add scaled, causally gated, norm-preserved copies of the last
// position's source activations into deeper layers during decoding.

#include <vector>

#include "crosstrace/model.hpp"
#include "crosstrace/synth.hpp"
#include "crosstrace/types.hpp"

namespace crosstrace {

/// Causal gate: a source at layer k may only feed targets strictly deeper.
inline int gate(int k, int l) { return l > k ? 1 : 0; }

enum class InjectComponent { Both, Attn, Mlp, Hidden };
enum class TargetMode { RrRank, AfterDeepestSource };

const char* inject_component_name(InjectComponent c);
const char* target_mode_name(TargetMode m);

struct InjectionPlan {
  std::vector<int> src_attn, tgt_attn;
  std::vector<int> src_mlp, tgt_mlp;
  std::vector<int> src_hidden, tgt_hidden;
  Vector rr_attn, rr_mlp, rr_hidden;  // per-layer weights, clamped to >= 0
  double lambda_a = 0.0;
  double lambda_m = 0.0;
  bool use_rr_scaling = true;
  bool use_normalization = true;
  InjectComponent component = InjectComponent::Both;
  TargetMode target_mode = TargetMode::RrRank;
  int n_layers = 0;
  int k1 = 0, k2 = 0;
};

/// Ranks layers per component by RR descending (ties break toward the lower
/// index), takes the top k1 as sources and k2 more as targets (by rank, or
/// the k2 layers right after the deepest source). `layer_pool` restricts the
/// candidate layers; empty means all. `rr_hidden` enables the hidden-state
/// ablation channel. NaN entries rank below everything.
InjectionPlan build_plan(const Vector& rr_attn, const Vector& rr_mlp, int k1,
                         int k2, double lambda_a, double lambda_m,
                         TargetMode mode = TargetMode::RrRank,
                         const std::vector<int>& layer_pool = {},
                         const Vector* rr_hidden = nullptr);

/// Hooks implementing the plan: observers record each source layer's
/// last-position output as the pass runs; interveners at target layers add
/// the gated weighted sum and optionally rescale back to the original norm.
/// State resets at the embedding observer, so the same HookSet re-arms on
/// every decode step with "last position" tracking the growing sequence.
HookSet make_injection_hooks(const InjectionPlan& plan);

/// Greedy decode with the plan's hooks active at every step.
std::vector<int> injected_decode(const Weights& w,
                                 const MultimodalSequence& seq,
                                 const InjectionPlan& plan, int max_new,
                                 int stop_token);

struct LambdaChoice {
  double lambda_a = 0.0;
  double lambda_m = 0.0;
  double accuracy = 0.0;  // corrupted-image QA accuracy at the chosen pair
  double baseline_accuracy = 0.0;
};

/// Grid search over candidate lambda pairs on held-out samples: picks the
/// pair maximizing QA accuracy on corrupted images (ties prefer smaller
/// lambdas). Corruption is seeded per sample index off `rng`.
LambdaChoice calibrate_lambda(const Weights& w, const InjectionPlan& plan,
                              const std::vector<const QASample*>& samples,
                              const Vocab& vocab, double sigma, Rng& rng,
                              const std::vector<double>& candidates_a,
                              const std::vector<double>& candidates_m);

}  // namespace crosstrace
