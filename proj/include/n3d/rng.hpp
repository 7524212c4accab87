#pragma once

#include <cstdint>

namespace n3d {

// Counter-based generator. Draw k returns splitmix64(seed + (k + 1) * 0x9E3779B97F4A7C15),
// i.e. the SplitMix64 finalizer applied to a Weyl sequence keyed by the seed. The stream
// depends only on (seed, k), so it is identical on every platform.
//
// uniform() maps the top 53 bits of a draw to [0, 1). normal() uses Box-Muller on two
// uniforms (u1 taken as 1 - uniform() so the log argument is in (0, 1]) and returns the
// cosine branch first, then the cached sine branch.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : seed_(seed) {}

  std::uint64_t next_u64();
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // Integer in [0, n). Uses rejection so the result is unbiased.
  std::uint64_t below(std::uint64_t n);
  int range(int lo, int hi_inclusive) { return lo + static_cast<int>(below(static_cast<std::uint64_t>(hi_inclusive - lo + 1))); }
  double normal();

  std::uint64_t seed() const { return seed_; }
  std::uint64_t counter() const { return counter_; }

  // Independent child stream, e.g. one per dataset item.
  Rng fork(std::uint64_t salt) const;

 private:
  std::uint64_t seed_;
  std::uint64_t counter_ = 0;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

std::uint64_t splitmix64(std::uint64_t x);

}  // namespace n3d
