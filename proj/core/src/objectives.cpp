#include "nllpo/objectives.hpp"

#include <cmath>
#include <string>

namespace nllpo {

RewardKind parse_reward_kind(std::string_view name) {
  if (name == "scalar") return RewardKind::kScalar;
  if (name == "diagonal") return RewardKind::kDiagonal;
  if (name == "full") return RewardKind::kFull;
  throw Error(ErrorCode::kConfigError, "unknown reward kind '" + std::string(name) + "'");
}

std::string_view to_string(RewardKind kind) {
  switch (kind) {
    case RewardKind::kScalar: return "scalar";
    case RewardKind::kDiagonal: return "diagonal";
    case RewardKind::kFull: return "full";
  }
  return "scalar";
}

RewardParams::RewardParams(RewardKind kind, std::size_t n, Vector raw)
    : kind_(kind), dim_(n), raw_(std::move(raw)) {
  if (n == 0) throw Error(ErrorCode::kConfigError, "reward dimension must be positive");
  const std::size_t expected = kind == RewardKind::kScalar ? 1 : kind == RewardKind::kDiagonal ? n : n * n;
  if (raw_.size() != expected) throw Error(ErrorCode::kDimensionMismatch, "reward raw length");
  if (!all_finite(raw_)) throw Error(ErrorCode::kNonFiniteLoss, "reward parameters not finite");
}

RewardParams RewardParams::isotropic(std::size_t n, double u) {
  if (!(u > 0.0)) throw Error(ErrorCode::kNotPositiveDefinite, "isotropic reward needs u > 0");
  return RewardParams(RewardKind::kScalar, n, {std::log(u)});
}

RewardParams RewardParams::diagonal(std::span<const double> u) {
  Vector raw(u.size());
  for (std::size_t i = 0; i < u.size(); ++i) {
    if (!(u[i] > 0.0)) throw Error(ErrorCode::kNotPositiveDefinite, "diagonal reward needs u_j > 0");
    raw[i] = std::log(u[i]);
  }
  return RewardParams(RewardKind::kDiagonal, u.size(), std::move(raw));
}

RewardParams RewardParams::full(const SpdMatrix& u) {
  const auto& l = u.factor().storage();
  return RewardParams(RewardKind::kFull, u.dim(), Vector(l.begin(), l.end()));
}

RewardParams RewardParams::from_raw(RewardKind kind, std::size_t n, Vector raw) {
  return RewardParams(kind, n, std::move(raw));
}

SpdMatrix RewardParams::realized() const {
  switch (kind_) {
    case RewardKind::kScalar:
      return SpdMatrix::scaled_identity(dim_, std::exp(raw_[0]));
    case RewardKind::kDiagonal: {
      Vector u(dim_);
      for (std::size_t i = 0; i < dim_; ++i) u[i] = std::exp(raw_[i]);
      return SpdMatrix::diagonal(u);
    }
    case RewardKind::kFull: {
      // L and L·D (D = ±1 diagonal) give the same L·Lᵀ; flip columns to make the diagonal positive.
      Matrix l(dim_, dim_);
      for (std::size_t i = 0; i < dim_; ++i)
        for (std::size_t j = 0; j <= i; ++j) l(i, j) = raw_[i * dim_ + j];
      for (std::size_t j = 0; j < dim_; ++j) {
        if (l(j, j) < 0.0) {
          for (std::size_t i = j; i < dim_; ++i) l(i, j) = -l(i, j);
        }
      }
      return SpdMatrix::from_factor(std::move(l));
    }
  }
  throw Error(ErrorCode::kConfigError, "unknown reward kind");
}

double RewardParams::scalar() const {
  if (kind_ != RewardKind::kScalar) throw Error(ErrorCode::kConfigError, "reward is not scalar-isotropic");
  return std::exp(raw_[0]);
}

void PgConfig::validate() const {
  if (!(lambda > 0.0)) throw Error(ErrorCode::kConfigError, "lambda must be > 0");
  if (mc_samples < 1) throw Error(ErrorCode::kConfigError, "mc_samples must be >= 1");
}

NoiseDraws draw_noise(std::size_t rows, std::size_t dim, std::size_t samples, Rng& rng) {
  NoiseDraws out;
  out.reserve(samples);
  for (std::size_t s = 0; s < samples; ++s) out.push_back(rng.normal_matrix(rows, dim));
  return out;
}

Matrix lower_mask(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j <= i; ++j) m(i, j) = 1.0;
  return m;
}

double categorical_reward(const SpdMatrix& u, std::size_t predicted, std::size_t label) {
  if (predicted == label) return 0.0;
  const Matrix& m = u.matrix();
  return -(m(predicted, predicted) - 2.0 * m(predicted, label) + m(label, label));
}

double closed_form_J(const Matrix& a, const SpdMatrix& b, const LinearGaussianTruth& truth,
                     const SpdMatrix& u, double lambda, const SpdMatrix& sigma_x) {
  const std::size_t n = truth.output_dim();
  if (!a.same_shape(truth.lambda) || b.dim() != n || u.dim() != n || truth.sigma.dim() != n ||
      sigma_x.dim() != truth.input_dim()) {
    throw Error(ErrorCode::kDimensionMismatch, "closed_form_J");
  }
  const Matrix delta = sub(a, truth.lambda);
  const double mean_term = trace(matmul(matmul(matmul(transpose(delta), u.matrix()), delta), sigma_x.matrix()));
  const double cov_term = trace(matmul(u.matrix(), add(b.matrix(), truth.sigma.matrix())));
  const double entropy = 0.5 * (static_cast<double>(n) * kLog2PiE + log_det(b));
  return -mean_term - cov_term + lambda * entropy;
}

double reverse_kl_gaussian(const SpdMatrix& b, const SpdMatrix& sigma) {
  if (b.dim() != sigma.dim()) throw Error(ErrorCode::kDimensionMismatch, "reverse_kl_gaussian");
  const double tr = trace(matmul(spd_inverse(sigma).matrix(), b.matrix()));
  return 0.5 * (tr - static_cast<double>(b.dim()) + log_det(sigma) - log_det(b));
}

}  // namespace nllpo
