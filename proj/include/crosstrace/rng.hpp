#pragma once

#include "crosstrace/types.hpp"

#include <cstdint>

namespace crosstrace {

/// Counter-based splittable PRNG. A stream is (key, counter); drawing sample i
/// evaluates a keyed avalanche hash at counter i, so streams can be forked by
/// index and replayed out of order with identical results.
class Rng {
 public:
  explicit Rng(uint64_t seed);

  uint64_t next_u64();

  /// Uniform in [0, 1).
  double next_double();

  /// Sequential child stream; the n-th split of a given stream is always the
  /// same stream.
  Rng split();

  /// Indexed child stream. Pure function of (this stream's key, index):
  /// independent of how many samples or splits were already taken.
  Rng fork(uint64_t index) const;

 private:
  Rng(uint64_t key, int /*tag*/) : key_(key) {}

  uint64_t key_ = 0;
  uint64_t counter_ = 0;
  uint64_t splits_ = 0;
};

/// n i.i.d. Gaussian samples via Box-Muller (pairs consumed within the call,
/// no cross-call state). sigma must be >= 0; sigma == 0 yields all `mean`.
Vector gaussian(Rng& rng, double mean, double sigma, int n);

}  // namespace crosstrace
