#pragma once

#include <algorithm>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "nllpo/matrix.hpp"

namespace nllpo {

/// Seeded random stream. Every stochastic operation in the library draws from
/// an explicitly passed Rng, so a seed fully determines a run.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  double normal() { return normal_(engine_); }
  double uniform(double lo, double hi) {
    return lo + (hi - lo) * std::uniform_real_distribution<double>(0.0, 1.0)(engine_);
  }
  std::size_t index(std::size_t n) {
    return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine_);
  }
  /// Draws from the discrete distribution with the given probabilities.
  std::size_t categorical(std::span<const double> probs);
  Matrix normal_matrix(std::size_t rows, std::size_t cols);
  template <class It>
  void shuffle(It first, It last) {
    std::shuffle(first, last, engine_);
  }
  /// Independent child stream, e.g. one per seed or per sweep point.
  Rng split() { return Rng(engine_()); }

 private:
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

}  // namespace nllpo
