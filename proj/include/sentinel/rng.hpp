#pragma once

#include <cmath>
#include <cstdint>
#include <optional>

#include "sentinel/errors.hpp"

namespace sentinel {

/// Counter-friendly 64-bit generator (SplitMix64, Steele et al.). Chosen over
/// std::mt19937 because the algorithm is pinned by these few lines: rollout
/// files generated from a (seed, index) pair are reproducible on any platform
/// with IEEE-754 doubles and the same libm.
class SplitMix64 {
 public:
  explicit SplitMix64(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next() {
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  /// Uniform double in [0, 1) using the top 53 bits.
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  /// Uniform integer in [0, n).
  int uniform_int(int n) {
    if (n <= 0) throw PreconditionError("uniform_int requires n > 0");
    return static_cast<int>(next() % static_cast<std::uint64_t>(n));
  }

  /// Standard normal via the Marsaglia polar method; the rejected-pair loop
  /// keeps the stream deterministic for a given seed.
  double gaussian() {
    if (spare_) {
      double s = *spare_;
      spare_.reset();
      return s;
    }
    double u, v, q;
    do {
      u = 2.0 * uniform() - 1.0;
      v = 2.0 * uniform() - 1.0;
      q = u * u + v * v;
    } while (q >= 1.0 || q == 0.0);
    const double scale = std::sqrt(-2.0 * std::log(q) / q);
    spare_ = v * scale;
    return u * scale;
  }

 private:
  std::uint64_t state_;
  std::optional<double> spare_;
};

/// Derives an independent stream seed for (base_seed, index). Two rounds of
/// the SplitMix64 finalizer decorrelate neighboring indices.
inline std::uint64_t derive_stream(std::uint64_t base_seed, std::uint64_t index) {
  SplitMix64 mixer(base_seed ^ (index + 1) * 0x9E3779B97F4A7C15ULL);
  mixer.next();
  return mixer.next();
}

}  // namespace sentinel
