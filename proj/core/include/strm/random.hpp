#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <utility>

#include "strm/tensor.hpp"

namespace strm {

/// SplitMix64 finalizer, used to derive independent stream seeds.
std::uint64_t mix_seed(std::uint64_t x) noexcept;
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) noexcept;

/// Deterministic generator over std::mt19937_64. Distributions are computed
/// here rather than with <random> distributions, whose output is
/// implementation-defined.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }
  /// Uniform in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Standard normal via Box-Muller.
  double normal();
  /// Uniform integer in [0, n).
  std::size_t below(std::size_t n);

  template <typename T>
  void shuffle(std::span<T> items) {
    for (std::size_t i = items.size(); i > 1; --i) std::swap(items[i - 1], items[below(i)]);
  }

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

/// Uniform samples in +-sqrt(6 / (fan_in + fan_out)) from Rng(seed).
Tensor seeded_init(const Shape& shape, std::size_t fan_in, std::size_t fan_out, std::uint64_t seed);

}  // namespace strm
