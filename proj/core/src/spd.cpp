#include "nllpo/spd.hpp"

#include <cmath>
#include <string>

namespace nllpo {

namespace {

constexpr double kSymmetryTol = 1e-10;

Vector forward_substitute(const Matrix& l, std::span<const double> b) {
  const std::size_t n = l.rows();
  Vector y(n);
  for (std::size_t i = 0; i < n; ++i) {
    double s = b[i];
    for (std::size_t k = 0; k < i; ++k) s -= l(i, k) * y[k];
    y[i] = s / l(i, i);
  }
  return y;
}

Vector back_substitute_transposed(const Matrix& l, std::span<const double> y) {
  const std::size_t n = l.rows();
  Vector x(n);
  for (std::size_t ii = n; ii-- > 0;) {
    double s = y[ii];
    for (std::size_t k = ii + 1; k < n; ++k) s -= l(k, ii) * x[k];
    x[ii] = s / l(ii, ii);
  }
  return x;
}

}  // namespace

SpdMatrix::SpdMatrix(Matrix lower) : factor_(std::move(lower)) {
  full_ = matmul(factor_, transpose(factor_));
  full_ = symmetrize(full_);
}

SpdMatrix SpdMatrix::from_factor(Matrix lower) {
  if (!lower.is_square()) throw Error(ErrorCode::kNotSquare, "Cholesky factor must be square");
  for (std::size_t i = 0; i < lower.rows(); ++i) {
    if (!(lower(i, i) > 0.0) || !std::isfinite(lower(i, i))) {
      throw Error(ErrorCode::kNotPositiveDefinite, "factor diagonal must be positive");
    }
    for (std::size_t j = i + 1; j < lower.cols(); ++j) {
      if (lower(i, j) != 0.0) {
        throw Error(ErrorCode::kNotPositiveDefinite, "factor must be lower-triangular");
      }
    }
  }
  if (!all_finite(lower)) throw Error(ErrorCode::kNotPositiveDefinite, "non-finite factor");
  return SpdMatrix(std::move(lower));
}

SpdMatrix SpdMatrix::identity(std::size_t n) { return SpdMatrix(Matrix::identity(n)); }

SpdMatrix SpdMatrix::scaled_identity(std::size_t n, double value) {
  if (!(value > 0.0)) throw Error(ErrorCode::kNotPositiveDefinite, "scale must be positive");
  return SpdMatrix(scale(Matrix::identity(n), std::sqrt(value)));
}

SpdMatrix SpdMatrix::diagonal(std::span<const double> entries) {
  Vector roots(entries.size());
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (!(entries[i] > 0.0)) {
      throw Error(ErrorCode::kNotPositiveDefinite, "diagonal entries must be positive");
    }
    roots[i] = std::sqrt(entries[i]);
  }
  return SpdMatrix(Matrix::diagonal(std::span<const double>(roots)));
}

Vector SpdMatrix::solve(std::span<const double> b) const {
  if (b.size() != dim()) throw Error(ErrorCode::kDimensionMismatch, "solve rhs");
  return back_substitute_transposed(factor_, forward_substitute(factor_, b));
}

SpdMatrix SpdMatrix::scaled(double k) const {
  if (!(k > 0.0)) throw Error(ErrorCode::kNotPositiveDefinite, "scale must be positive");
  return SpdMatrix(nllpo::scale(factor_, std::sqrt(k)));
}

SpdMatrix cholesky(const Matrix& m) {
  if (!m.is_square()) throw Error(ErrorCode::kNotSquare, "cholesky of non-square matrix");
  if (!all_finite(m)) throw Error(ErrorCode::kNotPositiveDefinite, "non-finite input");
  if (asymmetry(m) > kSymmetryTol) {
    throw Error(ErrorCode::kNotSymmetric, "input not symmetric within 1e-10 relative");
  }
  const Matrix s = symmetrize(m);
  const std::size_t n = s.rows();
  Matrix l(n, n);
  for (std::size_t j = 0; j < n; ++j) {
    double pivot = s(j, j);
    for (std::size_t k = 0; k < j; ++k) pivot -= l(j, k) * l(j, k);
    if (!(pivot > 0.0)) {
      throw Error(ErrorCode::kNotPositiveDefinite,
                  "pivot " + std::to_string(j) + " is " + std::to_string(pivot));
    }
    const double ljj = std::sqrt(pivot);
    l(j, j) = ljj;
    for (std::size_t i = j + 1; i < n; ++i) {
      double v = s(i, j);
      for (std::size_t k = 0; k < j; ++k) v -= l(i, k) * l(j, k);
      l(i, j) = v / ljj;
    }
  }
  return SpdMatrix::from_factor(std::move(l));
}

SpdMatrix spd_inverse(const SpdMatrix& m) {
  const std::size_t n = m.dim();
  Matrix inv(n, n);
  Vector e(n, 0.0);
  for (std::size_t j = 0; j < n; ++j) {
    e.assign(n, 0.0);
    e[j] = 1.0;
    const Vector col = m.solve(e);
    for (std::size_t i = 0; i < n; ++i) inv(i, j) = col[i];
  }
  return cholesky(symmetrize(inv));
}

double log_det(const SpdMatrix& m) {
  double s = 0.0;
  for (std::size_t i = 0; i < m.dim(); ++i) s += std::log(m.factor()(i, i));
  return 2.0 * s;
}

double quadratic_form(const SpdMatrix& m, std::span<const double> d) {
  if (d.size() != m.dim()) throw Error(ErrorCode::kDimensionMismatch, "quadratic_form");
  // dᵀ L Lᵀ d = ‖Lᵀ d‖²
  const Matrix& l = m.factor();
  double s = 0.0;
  for (std::size_t j = 0; j < m.dim(); ++j) {
    double v = 0.0;
    for (std::size_t i = j; i < m.dim(); ++i) v += l(i, j) * d[i];
    s += v * v;
  }
  return s;
}

}  // namespace nllpo
