#pragma once

// Causal-tracing engine: Gaussian input corruption, clean/corrupted/patched
// triplet runs, recovery rates, and the component x layer x category sweep
// that produces the RR grid and the last-token attention profile.

#include <limits>
#include <string>
#include <vector>

#include "crosstrace/model.hpp"
#include "crosstrace/rng.hpp"
#include "crosstrace/synth.hpp"

namespace crosstrace {

/// One restoration target: activations of `site` at `layer` for `positions`
/// are overwritten with the clean trace's values. layer -1 addresses the
/// post-embedding hidden state (site must be Hidden there).
struct PatchEntry {
  Site site = Site::Hidden;
  int layer = -1;
  PositionList positions;
};

struct PatchSpec {
  std::vector<PatchEntry> entries;
  const ActivationTrace* source = nullptr;
};

/// Interveners that restore clean activations per the spec entries. Entries
/// sharing (site, layer) are merged; positions are validated against the
/// trace's sequence length.
HookSet make_patch_hooks(const PatchSpec& spec, const ActivationTrace& source);

/// Adds i.i.d. N(0, sigma^2) to every cell feature, clipped back to [0,1].
/// Object metadata is preserved; only the features change.
GridImage corrupt_image(const GridImage& image, double sigma, Rng& rng);

struct RecoveryRate {
  double value = std::numeric_limits<double>::quiet_NaN();
  bool included = false;
};

/// (p_patched - p_corrupted) / (p_clean - p_corrupted), excluded when the
/// denominator is smaller than eps_d in magnitude. Raw value; may fall
/// outside [0,1].
RecoveryRate recovery_rate(double p_clean, double p_corrupted,
                           double p_patched, double eps_d = 1e-3);

struct TripletResult {
  double p_clean = 0.0;
  double p_corrupted = 0.0;
  double p_patched = 0.0;
  double denom = 0.0;
  RecoveryRate rr;
};

/// Standalone three-run protocol for one sample: clean forward (recording a
/// trace), corrupted forward, patched forward. Probabilities are of
/// `yes_token` at the final input position. If `patch.source` is set it must
/// fingerprint-match this sample's clean trace.
TripletResult run_triplet(const Weights& w, const QASample& sample,
                          double sigma, const PatchSpec& patch, Rng& rng,
                          int yes_token, double eps_d = 1e-3);

struct RRCell {
  double mean_rr = std::numeric_limits<double>::quiet_NaN();
  double std_dev = std::numeric_limits<double>::quiet_NaN();
  double mean_rr_clamped = std::numeric_limits<double>::quiet_NaN();
  int n_included = 0;
  int n_excluded = 0;
};

struct RRGrid {
  std::vector<Site> sites;
  std::vector<int> layers;
  std::vector<Category> categories;
  std::vector<RRCell> cells;  // indexed site-major, then layer, then category

  uint64_t seed = 0;
  double sigma = 0.0;
  double eps_d = 0.0;
  int n_samples = 0;
  int skipped_empty_patches = 0;  // (sample, cell) pairs with no positions
  std::string checkpoint_hash;

  int index(Site s, int layer, Category c) const;
  RRCell& at(Site s, int layer, Category c);
  const RRCell& at(Site s, int layer, Category c) const;
};

struct SweepConfig {
  double sigma = 0.5;
  double eps_d = 1e-3;
  int yes_token = -1;
  int workers = 1;
  std::vector<Site> sites;          // empty: attn, ffn, hidden
  std::vector<int> layers;          // empty: all layers
  std::vector<Category> categories; // empty: all seven
};

/// Full grid sweep. Each sample gets one clean and one corrupted run (the
/// corruption seed forks off `rng` by sample index), then one patched run
/// per grid cell with nonempty positions.
RRGrid sweep(const Weights& w, const std::vector<const QASample*>& samples,
             const SweepConfig& cfg, Rng& rng);

struct RRVectors {
  Vector attn;    // mean last-token RR per layer, MHSA output
  Vector mlp;     // same for the FFN output
  Vector hidden;  // same for the hidden state
};

/// Extracts the final-position category row per component as length-L
/// vectors. Throws if the grid lacks those cells.
RRVectors last_token_rr(const RRGrid& grid);

struct SigmaCalibration {
  double sigma = 0.0;
  double drop = 0.0;  // mean clean-minus-corrupted probability of yes
  int iterations = 0;
};

/// Bisection for a corruption strength whose mean P(yes) drop on positive
/// samples lands in [drop_lo, drop_hi]. Corruption seeds fork off `rng` per
/// sample index, fixed across candidate sigmas. Throws if sigma_hi cannot
/// reach drop_lo or the search fails to land within max_iters.
SigmaCalibration calibrate_sigma(const Weights& w,
                                 const std::vector<const QASample*>& samples,
                                 int yes_token, Rng& rng, double drop_lo = 0.2,
                                 double drop_hi = 0.5, double sigma_hi = 2.0,
                                 int max_iters = 20);

struct AttentionProfile {
  std::vector<double> to_object_visual;   // per layer, head-averaged mass
  std::vector<double> to_textual_object;
  int n_samples = 0;
};

/// Head-averaged attention mass from the final position to object-visual and
/// textual-object positions, averaged over the positive samples.
AttentionProfile attention_profile(const Weights& w,
                                   const std::vector<const QASample*>& samples);

}  // namespace crosstrace
