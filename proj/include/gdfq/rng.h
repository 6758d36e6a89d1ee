// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace gdfq {

/// Seedable pseudorandom stream. Sampling routines are written out here
/// instead of using <random> distributions so the produced values are the
/// same across standard library implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0);

  /// Derives an independent stream from this one's seed and a name. Does not
  /// advance this stream.
  [[nodiscard]] Rng split(std::string_view name) const;

  std::uint64_t seed() const { return seed_; }

  std::uint64_t next_u64() { return engine_(); }
  /// Uniform on [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform on {0, ..., n-1}; unbiased via rejection.
  std::uint64_t uniform_int(std::uint64_t n);
  /// Standard normal via Box-Muller, caching the second variate.
  double normal();

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace gdfq
