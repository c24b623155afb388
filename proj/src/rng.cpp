#include "crosstrace/rng.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace crosstrace {

namespace {

constexpr uint64_t kGolden = 0x9E3779B97F4A7C15ull;
constexpr uint64_t kSplitDomain = 0xA5A5A5A5A5A5A5A5ull;
constexpr uint64_t kForkDomain = 0xC3C3C3C3C3C3C3C3ull;

// splitmix64 finalizer evaluated at position ctr of stream key.
uint64_t mix(uint64_t key, uint64_t ctr) {
  uint64_t x = key + kGolden * (ctr + 1);
  x ^= x >> 30;
  x *= 0xBF58476D1CE4E5B9ull;
  x ^= x >> 27;
  x *= 0x94D049BB133111EBull;
  x ^= x >> 31;
  return x;
}

}  // namespace

Rng::Rng(uint64_t seed) : key_(mix(seed, 0)) {}

uint64_t Rng::next_u64() { return mix(key_, counter_++); }

double Rng::next_double() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

Rng Rng::split() { return Rng(mix(key_ ^ kSplitDomain, splits_++), 0); }

Rng Rng::fork(uint64_t index) const {
  return Rng(mix(key_ ^ kForkDomain, index), 0);
}

Vector gaussian(Rng& rng, double mean, double sigma, int n) {
  if (sigma < 0.0) throw std::invalid_argument("gaussian: sigma must be >= 0");
  if (n < 0) throw std::invalid_argument("gaussian: n must be >= 0");
  Vector out(n);
  for (int i = 0; i < n; i += 2) {
    const double u1 = 1.0 - rng.next_double();  // (0, 1], keeps log finite
    const double u2 = rng.next_double();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * std::numbers::pi * u2;
    out[i] = mean + sigma * (r * std::cos(theta));
    if (i + 1 < n) out[i + 1] = mean + sigma * (r * std::sin(theta));
  }
  return out;
}

}  // namespace crosstrace
