#include "crosstrace/inject.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <memory>
#include <numeric>
#include <stdexcept>

#include "crosstrace/trace.hpp"

namespace crosstrace {

namespace {

/// Layer indices ranked by RR descending, ties toward the lower index.
/// NaN sorts below every number.
std::vector<int> rank_layers(const Vector& rr, const std::vector<int>& pool) {
  auto key = [&rr](int l) {
    const double v = rr[l];
    return std::isnan(v) ? -std::numeric_limits<double>::infinity() : v;
  };
  std::vector<int> order = pool;
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    if (key(a) != key(b)) return key(a) > key(b);
    return a < b;
  });
  return order;
}

Vector clamp_weights(const Vector& rr) {
  Vector out(rr.size());
  for (Eigen::Index i = 0; i < rr.size(); ++i)
    out[i] = std::isnan(rr[i]) ? 0.0 : std::max(rr[i], 0.0);
  return out;
}

void pick_sets(const Vector& rr, int k1, int k2, TargetMode mode,
               const std::vector<int>& pool, std::vector<int>& src,
               std::vector<int>& tgt) {
  std::vector<int> order = rank_layers(rr, pool);
  src.assign(order.begin(), order.begin() + k1);
  if (mode == TargetMode::RrRank) {
    tgt.assign(order.begin() + k1, order.begin() + k1 + k2);
  } else {
    const int deepest = src.empty() ? -1 : *std::max_element(src.begin(), src.end());
    std::vector<int> after;
    for (int l : pool)
      if (l > deepest) after.push_back(l);
    std::sort(after.begin(), after.end());
    if (static_cast<int>(after.size()) < k2)
      throw std::invalid_argument(
          "build_plan: fewer than k2 layers after the deepest source");
    tgt.assign(after.begin(), after.begin() + k2);
  }
  std::sort(src.begin(), src.end());
  std::sort(tgt.begin(), tgt.end());
}

bool contains(const std::vector<int>& v, int x) {
  return std::find(v.begin(), v.end(), x) != v.end();
}

struct HookState {
  // Per-pass last-position recordings, one slot per (site, layer).
  std::array<std::vector<Vector>, 3> rec;
  void reset() {
    for (auto& site_rec : rec)
      for (auto& v : site_rec) v.resize(0);
  }
};

bool channel_active(const InjectionPlan& plan, Site site) {
  switch (plan.component) {
    case InjectComponent::Both:
      return site == Site::Attn || site == Site::Ffn;
    case InjectComponent::Attn: return site == Site::Attn;
    case InjectComponent::Mlp: return site == Site::Ffn;
    case InjectComponent::Hidden: return site == Site::Hidden;
  }
  return false;
}

const std::vector<int>& sources_for(const InjectionPlan& plan, Site site) {
  switch (site) {
    case Site::Attn: return plan.src_attn;
    case Site::Ffn: return plan.src_mlp;
    case Site::Hidden: return plan.src_hidden;
  }
  throw std::invalid_argument("bad site");
}

const std::vector<int>& targets_for(const InjectionPlan& plan, Site site) {
  switch (site) {
    case Site::Attn: return plan.tgt_attn;
    case Site::Ffn: return plan.tgt_mlp;
    case Site::Hidden: return plan.tgt_hidden;
  }
  throw std::invalid_argument("bad site");
}

const Vector& weights_for(const InjectionPlan& plan, Site site) {
  switch (site) {
    case Site::Attn: return plan.rr_attn;
    case Site::Ffn: return plan.rr_mlp;
    case Site::Hidden: return plan.rr_hidden;
  }
  throw std::invalid_argument("bad site");
}

double lambda_for(const InjectionPlan& plan, Site site) {
  // The hidden-state ablation reuses the attention-channel strength.
  return site == Site::Ffn ? plan.lambda_m : plan.lambda_a;
}

}  // namespace

const char* inject_component_name(InjectComponent c) {
  switch (c) {
    case InjectComponent::Both: return "both";
    case InjectComponent::Attn: return "attn";
    case InjectComponent::Mlp: return "mlp";
    case InjectComponent::Hidden: return "hidden";
  }
  return "?";
}

const char* target_mode_name(TargetMode m) {
  return m == TargetMode::RrRank ? "rr_rank" : "after_deepest_source";
}

InjectionPlan build_plan(const Vector& rr_attn, const Vector& rr_mlp, int k1,
                         int k2, double lambda_a, double lambda_m,
                         TargetMode mode, const std::vector<int>& layer_pool,
                         const Vector* rr_hidden) {
  const auto L = static_cast<int>(rr_attn.size());
  if (L == 0 || rr_mlp.size() != L)
    throw std::invalid_argument("build_plan: RR vectors must share length L");
  if (rr_hidden && rr_hidden->size() != L)
    throw std::invalid_argument("build_plan: hidden RR vector length mismatch");
  if (k1 < 0 || k2 < 0)
    throw std::invalid_argument("build_plan: k1 and k2 must be >= 0");
  if (lambda_a < 0 || lambda_m < 0)
    throw std::invalid_argument("build_plan: lambdas must be >= 0");

  std::vector<int> pool = layer_pool;
  if (pool.empty()) {
    pool.resize(L);
    std::iota(pool.begin(), pool.end(), 0);
  } else {
    std::sort(pool.begin(), pool.end());
    if (std::unique(pool.begin(), pool.end()) != pool.end())
      throw std::invalid_argument("build_plan: duplicate layers in pool");
    if (pool.front() < 0 || pool.back() >= L)
      throw std::invalid_argument("build_plan: pool layer out of range");
  }
  if (k1 + k2 > static_cast<int>(pool.size()))
    throw std::invalid_argument("build_plan: k1 + k2 exceeds candidate layers");

  InjectionPlan plan;
  plan.n_layers = L;
  plan.k1 = k1;
  plan.k2 = k2;
  plan.lambda_a = lambda_a;
  plan.lambda_m = lambda_m;
  plan.target_mode = mode;
  plan.rr_attn = clamp_weights(rr_attn);
  plan.rr_mlp = clamp_weights(rr_mlp);
  pick_sets(rr_attn, k1, k2, mode, pool, plan.src_attn, plan.tgt_attn);
  pick_sets(rr_mlp, k1, k2, mode, pool, plan.src_mlp, plan.tgt_mlp);
  if (rr_hidden) {
    plan.rr_hidden = clamp_weights(*rr_hidden);
    pick_sets(*rr_hidden, k1, k2, mode, pool, plan.src_hidden,
              plan.tgt_hidden);
  }
  return plan;
}

HookSet make_injection_hooks(const InjectionPlan& plan) {
  if (plan.n_layers <= 0)
    throw std::invalid_argument("make_injection_hooks: empty plan");
  for (const auto* set : {&plan.src_attn, &plan.tgt_attn, &plan.src_mlp,
                          &plan.tgt_mlp, &plan.src_hidden, &plan.tgt_hidden})
    for (int l : *set)
      if (l < 0 || l >= plan.n_layers)
        throw std::invalid_argument("make_injection_hooks: layer out of range");
  if (plan.component == InjectComponent::Hidden && plan.rr_hidden.size() == 0)
    throw std::invalid_argument(
        "make_injection_hooks: hidden channel requires a hidden RR vector");

  auto state = std::make_shared<HookState>();
  for (auto& site_rec : state->rec) site_rec.resize(plan.n_layers);

  HookSet hooks;
  hooks.observers.push_back(
      [plan, state](int layer, Site site, const Matrix& x) {
        if (layer == -1) {
          state->reset();  // a new pass begins at the embedding
          return;
        }
        if (!channel_active(plan, site)) return;
        if (!contains(sources_for(plan, site), layer)) return;
        state->rec[static_cast<int>(site)][layer] =
            x.row(x.rows() - 1).transpose();
      });
  hooks.interveners.push_back(
      [plan, state](int layer, Site site,
                    const Matrix& x) -> std::optional<Matrix> {
        if (layer < 0 || !channel_active(plan, site)) return std::nullopt;
        const double lambda = lambda_for(plan, site);
        if (lambda == 0.0) return std::nullopt;
        if (!contains(targets_for(plan, site), layer)) return std::nullopt;

        const auto& rec = state->rec[static_cast<int>(site)];
        const Vector& rr = weights_for(plan, site);
        Vector add = Vector::Zero(x.cols());
        bool any = false;
        for (int k : sources_for(plan, site)) {
          if (!gate(k, layer) || rec[k].size() == 0) continue;
          const double wk = plan.use_rr_scaling ? rr[k] : 1.0;
          add += lambda * wk * rec[k];
          any = true;
        }
        if (!any) return std::nullopt;

        const auto last = x.rows() - 1;
        Matrix edit = x;
        const double norm0 = x.row(last).norm();
        edit.row(last) += add.transpose();
        if (plan.use_normalization) {
          const double norm1 = edit.row(last).norm();
          if (norm1 >= 1e-12) edit.row(last) *= norm0 / norm1;
        }
        return edit;
      });
  return hooks;
}

std::vector<int> injected_decode(const Weights& w,
                                 const MultimodalSequence& seq,
                                 const InjectionPlan& plan, int max_new,
                                 int stop_token) {
  HookSet hooks = make_injection_hooks(plan);
  return greedy_decode(w, seq, &hooks, max_new, stop_token);
}

LambdaChoice calibrate_lambda(const Weights& w, const InjectionPlan& plan,
                              const std::vector<const QASample*>& samples,
                              const Vocab& vocab, double sigma, Rng& rng,
                              const std::vector<double>& candidates_a,
                              const std::vector<double>& candidates_m) {
  if (samples.empty())
    throw std::invalid_argument("calibrate_lambda: no samples");
  if (candidates_a.empty() || candidates_m.empty())
    throw std::invalid_argument("calibrate_lambda: empty candidate list");

  // One fixed corruption per sample so every pair sees the same inputs.
  std::vector<Matrix> corrupted;
  corrupted.reserve(samples.size());
  for (size_t i = 0; i < samples.size(); ++i) {
    Rng crng = rng.fork(static_cast<uint64_t>(i));
    corrupted.push_back(
        corrupt_image(samples[i]->image, sigma, crng).cells);
  }

  auto accuracy_at = [&](double la, double lm) {
    InjectionPlan p = plan;
    p.lambda_a = la;
    p.lambda_m = lm;
    HookSet hooks = make_injection_hooks(p);
    int correct = 0;
    for (size_t i = 0; i < samples.size(); ++i) {
      const QASample& s = *samples[i];
      MultimodalSequence seq =
          embed(w, corrupted[i], s.question_ids, s.categories);
      const int tok = greedy_decode(w, seq, &hooks, 1, vocab.stop)[0];
      if (tok == (s.answer_yes ? vocab.yes : vocab.no)) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(samples.size());
  };

  // Ascending order makes the strict-improvement rule prefer small lambdas.
  std::vector<double> cand_a = candidates_a, cand_m = candidates_m;
  std::sort(cand_a.begin(), cand_a.end());
  std::sort(cand_m.begin(), cand_m.end());

  LambdaChoice best;
  best.baseline_accuracy = accuracy_at(0.0, 0.0);
  best.accuracy = -1.0;
  for (double la : cand_a) {
    for (double lm : cand_m) {
      const double acc = accuracy_at(la, lm);
      if (acc > best.accuracy) {
        best.accuracy = acc;
        best.lambda_a = la;
        best.lambda_m = lm;
      }
    }
  }
  return best;
}

}  // namespace crosstrace
