#pragma once

#include <cmath>
#include <functional>
#include <span>

#include "nllpo/autodiff.hpp"
#include "nllpo/matrix.hpp"
#include "nllpo/rng.hpp"
#include "nllpo/spd.hpp"

namespace nllpo::testing {

// GᵀG + eps·I, well away from singular for eps ~ 0.5.
inline SpdMatrix random_spd(std::size_t n, Rng& rng, double eps = 0.5) {
  const Matrix g = rng.normal_matrix(n, n);
  Matrix m = matmul(transpose(g), g);
  for (std::size_t i = 0; i < n; ++i) m(i, i) += eps;
  return cholesky(m);
}

inline Vector random_vector(std::size_t n, Rng& rng, double scale = 1.0) {
  Vector v(n);
  for (double& x : v) x = scale * rng.normal();
  return v;
}

// Central differences of a scalar function of a flat vector.
inline Vector fd_gradient(const std::function<double(std::span<const double>)>& f, std::span<const double> x,
                          double h = 1e-5) {
  Vector g(x.size());
  Vector xp(x.begin(), x.end());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = xp[i];
    xp[i] = keep + h;
    const double up = f(xp);
    xp[i] = keep - h;
    const double down = f(xp);
    xp[i] = keep;
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

// Value of a tape loss at a point.
template <class Loss>
double loss_value(const Loss& loss, std::span<const double> at) {
  Tape<double> tape;
  const Var p = tape.leaf(at);
  return tape.scalar(loss(tape, p));
}

template <class Loss>
Vector fd_of_loss(const Loss& loss, std::span<const double> at, double h = 1e-5) {
  return fd_gradient([&](std::span<const double> x) { return loss_value(loss, x); }, at, h);
}

// max_i |a_i - b_i| / max(|b|_inf, floor)
inline double rel_err(std::span<const double> a, std::span<const double> b, double floor = 1e-6) {
  double diff = 0.0, scale = floor;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff = std::max(diff, std::abs(a[i] - b[i]));
    scale = std::max(scale, std::abs(b[i]));
  }
  return diff / scale;
}

}  // namespace nllpo::testing
