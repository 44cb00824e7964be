#include "nllpo/rng.hpp"

namespace nllpo {

std::size_t Rng::categorical(std::span<const double> probs) {
  const double u = uniform(0.0, 1.0);
  double acc = 0.0;
  for (std::size_t k = 0; k < probs.size(); ++k) {
    acc += probs[k];
    if (u < acc) return k;
  }
  // Rounding left a sliver above the cumulative sum; take the last class with mass.
  for (std::size_t k = probs.size(); k-- > 0;) {
    if (probs[k] > 0.0) return k;
  }
  return probs.size() - 1;
}

Matrix Rng::normal_matrix(std::size_t rows, std::size_t cols) {
  Matrix m(rows, cols);
  for (double& v : m.data()) v = normal();
  return m;
}

}  // namespace nllpo
