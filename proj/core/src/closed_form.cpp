#include "nllpo/closed_form.hpp"

#include <cmath>

#include "nllpo/autodiff.hpp"
#include "nllpo/optim.hpp"

namespace nllpo {

namespace {

void require_lambda(double lambda) {
  if (!(lambda > 0.0) || !std::isfinite(lambda)) throw Error(ErrorCode::kConfigError, "lambda must be > 0");
}

}  // namespace

SpdMatrix optimal_reward(const SpdMatrix& sigma, double lambda) {
  require_lambda(lambda);
  return spd_inverse(sigma).scaled(lambda / 2.0);
}

double isotropic_reward(const SpdMatrix& sigma, double lambda) {
  require_lambda(lambda);
  return lambda * static_cast<double>(sigma.dim()) / (2.0 * trace(sigma.matrix()));
}

InnerSolution inner_solution(const SpdMatrix& u, const LinearGaussianTruth& truth, double lambda) {
  require_lambda(lambda);
  if (u.dim() != truth.output_dim()) throw Error(ErrorCode::kDimensionMismatch, "inner_solution: U vs Λ rows");
  return {truth.lambda, spd_inverse(u).scaled(lambda / 2.0)};
}

bool verify_family(const SpdMatrix& u, const SpdMatrix& sigma, double lambda, double tol) {
  if (u.dim() != sigma.dim()) throw Error(ErrorCode::kDimensionMismatch, "verify_family");
  const double n = static_cast<double>(u.dim());
  const double target = lambda * n * n / (2.0 * trace(sigma.matrix()));
  return std::abs(trace(u.matrix()) - target) <= tol * target;
}

double outer_nll_at_inner_solution(const SpdMatrix& u, const SpdMatrix& sigma, double lambda) {
  require_lambda(lambda);
  if (u.dim() != sigma.dim()) throw Error(ErrorCode::kDimensionMismatch, "outer_nll_at_inner_solution");
  const SpdMatrix b = spd_inverse(u).scaled(lambda / 2.0);
  const double n = static_cast<double>(sigma.dim());
  const double entropy = 0.5 * (n * kLog2PiE + log_det(sigma));
  // forward KL(Σ ‖ B) is reverse_kl with the roles swapped
  return reverse_kl_gaussian(sigma, b) + entropy;
}

double expected_reverse_kl(const Matrix& a, const SpdMatrix& b, const LinearGaussianTruth& truth,
                           const SpdMatrix& sigma_x) {
  if (!a.same_shape(truth.lambda) || sigma_x.dim() != truth.input_dim()) {
    throw Error(ErrorCode::kDimensionMismatch, "expected_reverse_kl");
  }
  const Matrix d = sub(a, truth.lambda);
  const Matrix prec = spd_inverse(truth.sigma).matrix();
  const double mean_term = trace(matmul(matmul(matmul(transpose(d), prec), d), sigma_x.matrix()));
  return reverse_kl_gaussian(b, truth.sigma) + 0.5 * mean_term;
}

Matrix strict_lower_mask(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < i; ++j) m(i, j) = 1.0;
  return m;
}

Vector pack_log_cholesky(const SpdMatrix& m) {
  const std::size_t n = m.dim();
  Vector raw(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < i; ++j) raw[i * n + j] = m.factor()(i, j);
    raw[i * n + i] = std::log(m.factor()(i, i));
  }
  return raw;
}

SpdMatrix unpack_log_cholesky(std::span<const double> raw, std::size_t n) {
  if (raw.size() != n * n) throw Error(ErrorCode::kDimensionMismatch, "log-Cholesky length");
  Matrix l(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < i; ++j) l(i, j) = raw[i * n + j];
    l(i, i) = std::exp(raw[i * n + i]);
  }
  return SpdMatrix::from_factor(std::move(l));
}

Vector pack_linear_gaussian(const Matrix& a, const SpdMatrix& b) {
  Vector theta(a.data().begin(), a.data().end());
  const Vector raw = pack_log_cholesky(b);
  theta.insert(theta.end(), raw.begin(), raw.end());
  return theta;
}

std::pair<Matrix, SpdMatrix> unpack_linear_gaussian(std::span<const double> theta, std::size_t n,
                                                    std::size_t m) {
  if (theta.size() != n * m + n * n) throw Error(ErrorCode::kDimensionMismatch, "linear-Gaussian θ length");
  Matrix a(n, m, Vector(theta.begin(), theta.begin() + static_cast<std::ptrdiff_t>(n * m)));
  return {std::move(a), unpack_log_cholesky(theta.subspan(n * m), n)};
}

InnerAscentResult maximize_closed_form_J(const LinearGaussianTruth& truth, const SpdMatrix& u, double lambda,
                                         const SpdMatrix& sigma_x, std::size_t max_iters, double grad_tol) {
  require_lambda(lambda);
  const std::size_t n = truth.output_dim();
  const std::size_t m = truth.input_dim();
  auto neg_j = [&](auto& tape, Var theta) {
    return tape.neg(closed_form_J_tape(tape, theta, truth, u, lambda, sigma_x));
  };
  auto fn = [&](std::span<const double> x) {
    auto r = value_and_gradient(neg_j, x);
    return std::make_pair(r.value, std::move(r.gradient));
  };
  const Vector x0 = pack_linear_gaussian(Matrix(n, m), SpdMatrix::identity(n));
  const DescentResult r = minimize_armijo(fn, x0, max_iters, grad_tol);
  auto [a, b] = unpack_linear_gaussian(r.x, n, m);
  return {std::move(a), std::move(b), -r.value, r.grad_norm, r.iterations, r.converged};
}

OuterDescentResult minimize_outer_nll(const SpdMatrix& sigma, double lambda, std::size_t max_iters,
                                      double grad_tol) {
  require_lambda(lambda);
  const std::size_t n = sigma.dim();
  auto loss = [&](auto& tape, Var raw) { return outer_nll_tape(tape, raw, sigma, lambda); };
  auto fn = [&](std::span<const double> x) {
    auto r = value_and_gradient(loss, x);
    return std::make_pair(r.value, std::move(r.gradient));
  };
  const DescentResult r = minimize_armijo(fn, pack_log_cholesky(SpdMatrix::identity(n)), max_iters, grad_tol);
  return {unpack_log_cholesky(r.x, n), r.value, r.grad_norm, r.iterations, r.converged};
}

}  // namespace nllpo
