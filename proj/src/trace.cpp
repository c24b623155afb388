#include "crosstrace/trace.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>

#include "crosstrace/parallel.hpp"

namespace crosstrace {

namespace {

const Matrix& trace_matrix(const ActivationTrace& t, Site site, int layer) {
  if (layer == -1) {
    if (site != Site::Hidden)
      throw std::invalid_argument("patch: layer -1 only has a hidden site");
    return t.embed_hidden;
  }
  if (layer < 0 || layer >= static_cast<int>(t.layers.size()))
    throw std::invalid_argument("patch: layer out of range");
  switch (site) {
    case Site::Attn: return t.layers[layer].attn_out;
    case Site::Ffn: return t.layers[layer].ffn_out;
    case Site::Hidden: return t.layers[layer].hidden;
  }
  throw std::invalid_argument("patch: bad site");
}

}  // namespace

HookSet make_patch_hooks(const PatchSpec& spec, const ActivationTrace& source) {
  if (source.empty())
    throw std::invalid_argument("patch: source trace is empty");
  // Merge entries per (layer, site) and validate against the trace.
  std::map<std::pair<int, int>, PositionList> merged;
  for (const auto& e : spec.entries) {
    const Matrix& src = trace_matrix(source, e.site, e.layer);
    for (int p : e.positions)
      if (p < 0 || p >= src.rows())
        throw std::invalid_argument("patch: position out of range");
    auto& positions = merged[{e.layer, static_cast<int>(e.site)}];
    positions.insert(positions.end(), e.positions.begin(), e.positions.end());
  }
  for (auto& [key, positions] : merged) {
    std::sort(positions.begin(), positions.end());
    positions.erase(std::unique(positions.begin(), positions.end()),
                    positions.end());
  }

  HookSet hooks;
  const ActivationTrace* src = &source;
  hooks.interveners.push_back(
      [merged, src](int layer, Site site,
                    const Matrix& x) -> std::optional<Matrix> {
        auto it = merged.find({layer, static_cast<int>(site)});
        if (it == merged.end() || it->second.empty()) return std::nullopt;
        const Matrix& clean = trace_matrix(*src, site, layer);
        if (clean.rows() != x.rows() || clean.cols() != x.cols())
          throw std::runtime_error("patch: trace shape does not match run");
        Matrix edit = x;
        for (int p : it->second) edit.row(p) = clean.row(p);
        return edit;
      });
  return hooks;
}

GridImage corrupt_image(const GridImage& image, double sigma, Rng& rng) {
  if (sigma < 0) throw std::invalid_argument("corrupt_image: sigma < 0");
  GridImage out = image;
  Vector noise = gaussian(rng, 0.0, sigma, static_cast<int>(out.cells.size()));
  Eigen::Index k = 0;
  for (Eigen::Index r = 0; r < out.cells.rows(); ++r)
    for (Eigen::Index c = 0; c < out.cells.cols(); ++c)
      out.cells(r, c) =
          std::clamp(out.cells(r, c) + noise[k++], 0.0, 1.0);
  return out;
}

RecoveryRate recovery_rate(double p_clean, double p_corrupted,
                           double p_patched, double eps_d) {
  const double d = p_clean - p_corrupted;
  RecoveryRate rr;
  if (std::abs(d) < eps_d) return rr;
  rr.value = (p_patched - p_corrupted) / d;
  rr.included = true;
  return rr;
}

TripletResult run_triplet(const Weights& w, const QASample& sample,
                          double sigma, const PatchSpec& patch, Rng& rng,
                          int yes_token, double eps_d) {
  MultimodalSequence clean_seq = embed_qa(w, sample);
  ForwardResult clean = forward(w, clean_seq, nullptr, TraceMode::Components);
  if (patch.source && patch.source->fingerprint() != clean.trace.fingerprint())
    throw std::invalid_argument(
        "run_triplet: patch references a foreign trace");

  GridImage corrupted = corrupt_image(sample.image, sigma, rng);
  MultimodalSequence corr_seq =
      embed(w, corrupted.cells, sample.question_ids, sample.categories);
  ForwardResult corr = forward(w, corr_seq);

  HookSet hooks = make_patch_hooks(patch, clean.trace);
  ForwardResult patched = forward(w, corr_seq, &hooks);

  const auto last = clean.logits.rows() - 1;
  TripletResult res;
  res.p_clean = token_prob(clean.logits.row(last).transpose(), yes_token);
  res.p_corrupted = token_prob(corr.logits.row(last).transpose(), yes_token);
  res.p_patched = token_prob(patched.logits.row(last).transpose(), yes_token);
  res.denom = res.p_clean - res.p_corrupted;
  res.rr = recovery_rate(res.p_clean, res.p_corrupted, res.p_patched, eps_d);
  return res;
}

int RRGrid::index(Site s, int layer, Category c) const {
  auto si = std::find(sites.begin(), sites.end(), s);
  auto li = std::find(layers.begin(), layers.end(), layer);
  auto ci = std::find(categories.begin(), categories.end(), c);
  if (si == sites.end() || li == layers.end() || ci == categories.end())
    throw std::invalid_argument("rr_grid: cell not present");
  const auto ns = static_cast<int>(si - sites.begin());
  const auto nl = static_cast<int>(li - layers.begin());
  const auto nc = static_cast<int>(ci - categories.begin());
  return (ns * static_cast<int>(layers.size()) + nl) *
             static_cast<int>(categories.size()) +
         nc;
}

RRCell& RRGrid::at(Site s, int layer, Category c) {
  return cells[index(s, layer, c)];
}

const RRCell& RRGrid::at(Site s, int layer, Category c) const {
  return cells[index(s, layer, c)];
}

RRGrid sweep(const Weights& w, const std::vector<const QASample*>& samples,
             const SweepConfig& cfg, Rng& rng) {
  if (samples.empty()) throw std::invalid_argument("sweep: no samples");
  if (cfg.yes_token < 0 || cfg.yes_token >= w.config.vocab_size)
    throw std::invalid_argument("sweep: yes_token out of range");
  if (cfg.sigma < 0) throw std::invalid_argument("sweep: sigma < 0");

  RRGrid grid;
  grid.sites = cfg.sites.empty()
                   ? std::vector<Site>{Site::Attn, Site::Ffn, Site::Hidden}
                   : cfg.sites;
  if (cfg.layers.empty()) {
    for (int l = 0; l < w.config.n_layers; ++l) grid.layers.push_back(l);
  } else {
    grid.layers = cfg.layers;
    for (int l : grid.layers)
      if (l < 0 || l >= w.config.n_layers)
        throw std::invalid_argument("sweep: layer out of range");
  }
  if (cfg.categories.empty()) {
    grid.categories = {Category::EarlyVisual,  Category::ObjectVisual,
                       Category::LateVisual,   Category::EarlyTextual,
                       Category::TextualObject, Category::LateTextual,
                       Category::Last};
  } else {
    grid.categories = cfg.categories;
  }
  grid.cells.assign(
      grid.sites.size() * grid.layers.size() * grid.categories.size(), {});
  grid.sigma = cfg.sigma;
  grid.eps_d = cfg.eps_d;
  grid.n_samples = static_cast<int>(samples.size());

  const int n_cells = static_cast<int>(grid.cells.size());
  // Per (sample, cell): NaN = skipped empty patch, else raw RR; inclusion is
  // decided by the shared per-sample denominator.
  struct SampleOut {
    bool denom_ok = false;
    std::vector<double> rr;
  };
  std::vector<SampleOut> outs(samples.size());

  parallel_for(
      static_cast<int>(samples.size()), std::max(cfg.workers, 1),
      [&](int i) {
        const QASample& s = *samples[i];
        SampleOut& out = outs[i];
        out.rr.assign(n_cells, std::numeric_limits<double>::quiet_NaN());

        MultimodalSequence clean_seq = embed_qa(w, s);
        ForwardResult clean =
            forward(w, clean_seq, nullptr, TraceMode::Components);
        const auto last = clean.logits.rows() - 1;
        const double p_clean =
            token_prob(clean.logits.row(last).transpose(), cfg.yes_token);

        Rng crng = rng.fork(i);
        GridImage corrupted = corrupt_image(s.image, cfg.sigma, crng);
        MultimodalSequence corr_seq =
            embed(w, corrupted.cells, s.question_ids, s.categories);
        ForwardResult corr = forward(w, corr_seq);
        const double p_corr =
            token_prob(corr.logits.row(last).transpose(), cfg.yes_token);

        out.denom_ok = std::abs(p_clean - p_corr) >= cfg.eps_d;

        std::vector<PositionList> cat_positions(grid.categories.size());
        for (size_t c = 0; c < grid.categories.size(); ++c)
          cat_positions[c] = clean_seq.positions_of(grid.categories[c]);

        int cell = 0;
        for (Site site : grid.sites) {
          for (int layer : grid.layers) {
            for (size_t c = 0; c < grid.categories.size(); ++c, ++cell) {
              const PositionList& pos = cat_positions[c];
              if (pos.empty()) continue;  // stays NaN: skipped
              if (!out.denom_ok) {
                out.rr[cell] = std::numeric_limits<double>::infinity();
                continue;  // marker: attempted but denominator-excluded
              }
              PatchSpec spec;
              spec.entries.push_back({site, layer, pos});
              HookSet hooks = make_patch_hooks(spec, clean.trace);
              ForwardResult patched = forward(w, corr_seq, &hooks);
              const double p_patch = token_prob(
                  patched.logits.row(last).transpose(), cfg.yes_token);
              out.rr[cell] =
                  recovery_rate(p_clean, p_corr, p_patch, cfg.eps_d).value;
            }
          }
        }
      });

  // Sequential reduction in sample order.
  std::vector<double> sum(n_cells, 0.0), sumsq(n_cells, 0.0),
      sum_clamped(n_cells, 0.0);
  for (const auto& out : outs) {
    for (int c = 0; c < n_cells; ++c) {
      const double v = out.rr[c];
      if (std::isnan(v)) {
        grid.cells[c].n_excluded += 1;
        grid.skipped_empty_patches += 1;
      } else if (std::isinf(v)) {
        grid.cells[c].n_excluded += 1;
      } else {
        grid.cells[c].n_included += 1;
        sum[c] += v;
        sumsq[c] += v * v;
        sum_clamped[c] += std::clamp(v, 0.0, 1.0);
      }
    }
  }
  for (int c = 0; c < n_cells; ++c) {
    RRCell& cell = grid.cells[c];
    if (cell.n_included > 0) {
      const double n = cell.n_included;
      cell.mean_rr = sum[c] / n;
      const double var = std::max(sumsq[c] / n - cell.mean_rr * cell.mean_rr, 0.0);
      cell.std_dev = std::sqrt(var);
      cell.mean_rr_clamped = sum_clamped[c] / n;
    }
  }
  return grid;
}

RRVectors last_token_rr(const RRGrid& grid) {
  RRVectors v;
  const auto n_layers = static_cast<int>(grid.layers.size());
  v.attn.resize(n_layers);
  v.mlp.resize(n_layers);
  v.hidden.resize(n_layers);
  for (int i = 0; i < n_layers; ++i) {
    v.attn[i] = grid.at(Site::Attn, grid.layers[i], Category::Last).mean_rr;
    v.mlp[i] = grid.at(Site::Ffn, grid.layers[i], Category::Last).mean_rr;
    v.hidden[i] =
        grid.at(Site::Hidden, grid.layers[i], Category::Last).mean_rr;
  }
  return v;
}

SigmaCalibration calibrate_sigma(const Weights& w,
                                 const std::vector<const QASample*>& samples,
                                 int yes_token, Rng& rng, double drop_lo,
                                 double drop_hi, double sigma_hi,
                                 int max_iters) {
  std::vector<const QASample*> positives;
  for (const QASample* s : samples)
    if (s->answer_yes) positives.push_back(s);
  if (positives.empty())
    throw std::invalid_argument("calibrate_sigma: no positive samples");
  if (!(0 < drop_lo && drop_lo < drop_hi))
    throw std::invalid_argument("calibrate_sigma: bad drop band");

  std::vector<double> p_clean(positives.size());
  for (size_t i = 0; i < positives.size(); ++i) {
    MultimodalSequence seq = embed_qa(w, *positives[i]);
    ForwardResult fr = forward(w, seq);
    p_clean[i] =
        token_prob(fr.logits.row(fr.logits.rows() - 1).transpose(), yes_token);
  }

  auto mean_drop = [&](double sigma) {
    double total = 0.0;
    for (size_t i = 0; i < positives.size(); ++i) {
      Rng crng = rng.fork(i);
      GridImage corrupted = corrupt_image(positives[i]->image, sigma, crng);
      MultimodalSequence seq = embed(w, corrupted.cells,
                                     positives[i]->question_ids,
                                     positives[i]->categories);
      ForwardResult fr = forward(w, seq);
      total += p_clean[i] - token_prob(
                                fr.logits.row(fr.logits.rows() - 1).transpose(),
                                yes_token);
    }
    return total / static_cast<double>(positives.size());
  };

  SigmaCalibration cal;
  double hi_drop = mean_drop(sigma_hi);
  if (hi_drop < drop_lo)
    throw std::runtime_error(
        "calibrate_sigma: even sigma_hi cannot reach the target drop");
  if (hi_drop <= drop_hi) {
    cal.sigma = sigma_hi;
    cal.drop = hi_drop;
    return cal;
  }
  double lo = 0.0, hi = sigma_hi;
  for (int it = 1; it <= max_iters; ++it) {
    const double mid = 0.5 * (lo + hi);
    const double d = mean_drop(mid);
    cal.iterations = it;
    if (d < drop_lo) {
      lo = mid;
    } else if (d > drop_hi) {
      hi = mid;
    } else {
      cal.sigma = mid;
      cal.drop = d;
      return cal;
    }
  }
  throw std::runtime_error(
      "calibrate_sigma: did not land in the drop band within the iteration "
      "budget");
}

AttentionProfile attention_profile(
    const Weights& w, const std::vector<const QASample*>& samples) {
  AttentionProfile prof;
  prof.to_object_visual.assign(w.config.n_layers, 0.0);
  prof.to_textual_object.assign(w.config.n_layers, 0.0);
  for (const QASample* s : samples) {
    if (!s->answer_yes) continue;
    MultimodalSequence seq = embed_qa(w, *s);
    const PositionList obj_vis = seq.positions_of(Category::ObjectVisual);
    const PositionList obj_txt = seq.positions_of(Category::TextualObject);
    ForwardResult fr = forward(w, seq, nullptr, TraceMode::Full);
    const auto last = seq.length() - 1;
    for (int l = 0; l < w.config.n_layers; ++l) {
      double mass_vis = 0.0, mass_txt = 0.0;
      for (const Matrix& att : fr.trace.layers[l].attn_weights) {
        for (int p : obj_vis) mass_vis += att(last, p);
        for (int p : obj_txt) mass_txt += att(last, p);
      }
      const auto n_heads = static_cast<double>(w.config.n_heads);
      prof.to_object_visual[l] += mass_vis / n_heads;
      prof.to_textual_object[l] += mass_txt / n_heads;
    }
    prof.n_samples += 1;
  }
  if (prof.n_samples == 0)
    throw std::invalid_argument("attention_profile: no positive samples");
  for (int l = 0; l < w.config.n_layers; ++l) {
    prof.to_object_visual[l] /= prof.n_samples;
    prof.to_textual_object[l] /= prof.n_samples;
  }
  return prof;
}

}  // namespace crosstrace
