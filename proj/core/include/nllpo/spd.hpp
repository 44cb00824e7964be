#pragma once

#include <span>

#include "nllpo/matrix.hpp"

namespace nllpo {

/// Symmetric positive-definite matrix held through its lower Cholesky factor.
/// Immutable once built; the only way in is `cholesky` or `from_factor`.
class SpdMatrix {
 public:
  /// Validates that `lower` is lower-triangular with a strictly positive diagonal.
  static SpdMatrix from_factor(Matrix lower);
  static SpdMatrix identity(std::size_t n);
  static SpdMatrix scaled_identity(std::size_t n, double value);
  static SpdMatrix diagonal(std::span<const double> entries);

  std::size_t dim() const noexcept { return factor_.rows(); }
  const Matrix& factor() const noexcept { return factor_; }
  /// Reconstructed L·Lᵀ.
  const Matrix& matrix() const noexcept { return full_; }

  /// Solves M x = b through the two triangular systems.
  Vector solve(std::span<const double> b) const;
  /// Returns k·M for k > 0.
  SpdMatrix scaled(double k) const;

 private:
  explicit SpdMatrix(Matrix lower);

  Matrix factor_;
  Matrix full_;
};

/// Symmetrizes `m` after checking it is symmetric within 1e-10 relative, then
/// factors it without pivoting. Throws NotPositiveDefinite on a pivot <= 0.
SpdMatrix cholesky(const Matrix& m);
SpdMatrix spd_inverse(const SpdMatrix& m);
double log_det(const SpdMatrix& m);
/// dᵀ M d
double quadratic_form(const SpdMatrix& m, std::span<const double> d);

}  // namespace nllpo
