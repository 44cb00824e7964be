#pragma once

#include <cmath>
#include <span>
#include <utility>

#include "nllpo/matrix.hpp"
#include "nllpo/models.hpp"
#include "nllpo/objectives.hpp"
#include "nllpo/spd.hpp"
#include "nllpo/tape.hpp"

namespace nllpo {

/// Maximiser of the inner objective for a fixed reward U.
struct InnerSolution {
  Matrix a_star;     ///< = Λ
  SpdMatrix b_star;  ///< = (λ/2)·U⁻¹
};

/// U* = (λ/2)·Σ⁻¹
SpdMatrix optimal_reward(const SpdMatrix& sigma, double lambda);

/// u = λn / (2·Tr Σ), the canonical isotropic reward.
double isotropic_reward(const SpdMatrix& sigma, double lambda);

InnerSolution inner_solution(const SpdMatrix& u, const LinearGaussianTruth& truth, double lambda);

/// True iff |Tr U − λn²/(2 Tr Σ)| ≤ tol · λn²/(2 Tr Σ). Only the trace
/// condition is checked; U is SPD by construction.
bool verify_family(const SpdMatrix& u, const SpdMatrix& sigma, double lambda, double tol);

/// Expected NLL of Y|X ~ N(ΛX, Σ) under the model N(ΛX, B*(U)).
/// Equals KL(N(0,Σ) ‖ N(0,B*)) + H(N(0,Σ)).
double outer_nll_at_inner_solution(const SpdMatrix& u, const SpdMatrix& sigma, double lambda);

/// E_X KL(N(AX, B) ‖ N(ΛX, Σ)) for zero-mean X with covariance Σ_X.
double expected_reverse_kl(const Matrix& a, const SpdMatrix& b, const LinearGaussianTruth& truth,
                           const SpdMatrix& sigma_x);

// Log-Cholesky coordinates for an SPD matrix: R is n×n, L = strictlower(R) +
// diag(exp(diag R)), M = L·Lᵀ. Unconstrained, so plain descent stays SPD.
Vector pack_log_cholesky(const SpdMatrix& m);
SpdMatrix unpack_log_cholesky(std::span<const double> raw, std::size_t n);

// Linear-Gaussian policy coordinates θ = [A (n×m row-major), R (log-Cholesky of B)].
Vector pack_linear_gaussian(const Matrix& a, const SpdMatrix& b);
std::pair<Matrix, SpdMatrix> unpack_linear_gaussian(std::span<const double> theta, std::size_t n,
                                                    std::size_t m);

Matrix strict_lower_mask(std::size_t n);

template <class T>
Var log_cholesky_factor(Tape<T>& tape, Var raw, std::size_t n) {
  return tape.add(tape.mul(raw, tape.constant(strict_lower_mask(n))),
                  tape.diag_embed(tape.exp(tape.diag_part(raw))));
}

/// closed_form_J on a tape over θ (see pack_linear_gaussian).
template <class T>
Var closed_form_J_tape(Tape<T>& tape, Var theta, const LinearGaussianTruth& truth, const SpdMatrix& u,
                       double lambda, const SpdMatrix& sigma_x) {
  const std::size_t n = truth.output_dim();
  const std::size_t m = truth.input_dim();
  const Var a = tape.slice(theta, 0, n, m);
  const Var raw = tape.slice(theta, n * m, n, n);
  const Var d = tape.sub(a, tape.constant(truth.lambda));
  const Var uc = tape.constant(u.matrix());
  // Tr(DᵀUDΣ_X) = Σ_ij (UD)_ij (DΣ_X)_ij
  const Var mean_term = tape.sum(tape.mul(tape.matmul(uc, d), tape.matmul(d, tape.constant(sigma_x.matrix()))));
  const Var l = log_cholesky_factor(tape, raw, n);
  const Var b = tape.matmul(l, tape.transpose(l));
  const Var cov_term = tape.add_scalar(tape.sum(tape.mul(uc, b)), trace(matmul(u.matrix(), truth.sigma.matrix())));
  const Var entropy = tape.add_scalar(tape.sum(tape.diag_part(raw)), 0.5 * static_cast<double>(n) * kLog2PiE);
  return tape.add(tape.neg(tape.add(mean_term, cov_term)), tape.scale(entropy, lambda));
}

/// expected_reverse_kl on a tape over θ.
template <class T>
Var expected_reverse_kl_tape(Tape<T>& tape, Var theta, const LinearGaussianTruth& truth,
                             const SpdMatrix& sigma_x) {
  const std::size_t n = truth.output_dim();
  const std::size_t m = truth.input_dim();
  const Matrix prec = spd_inverse(truth.sigma).matrix();
  const Var a = tape.slice(theta, 0, n, m);
  const Var raw = tape.slice(theta, n * m, n, n);
  const Var d = tape.sub(a, tape.constant(truth.lambda));
  const Var pc = tape.constant(prec);
  const Var mean_term = tape.sum(tape.mul(tape.matmul(pc, d), tape.matmul(d, tape.constant(sigma_x.matrix()))));
  const Var l = log_cholesky_factor(tape, raw, n);
  const Var tr = tape.sum(tape.mul(pc, tape.matmul(l, tape.transpose(l))));
  const Var logdet_b = tape.scale(tape.sum(tape.diag_part(raw)), 2.0);
  const Var inner = tape.sub(tape.add(tr, mean_term), logdet_b);
  return tape.scale(tape.add_scalar(inner, log_det(truth.sigma) - static_cast<double>(n)), 0.5);
}

/// outer_nll_at_inner_solution on a tape over the log-Cholesky coordinates of U:
///   ½[n log 2π + (2/λ) Tr(UΣ) + n log(λ/2) − log det U].
template <class T>
Var outer_nll_tape(Tape<T>& tape, Var raw_u, const SpdMatrix& sigma, double lambda) {
  const std::size_t n = sigma.dim();
  const Var raw = tape.slice(raw_u, 0, n, n);
  const Var l = log_cholesky_factor(tape, raw, n);
  const Var tr = tape.sum(tape.mul(tape.matmul(l, tape.transpose(l)), tape.constant(sigma.matrix())));
  const Var logdet_u = tape.scale(tape.sum(tape.diag_part(raw)), 2.0);
  const double nd = static_cast<double>(n);
  const Var body = tape.sub(tape.scale(tr, 2.0 / lambda), logdet_u);
  return tape.scale(tape.add_scalar(body, nd * kLog2PiConst + nd * std::log(lambda / 2.0)), 0.5);
}

struct InnerAscentResult {
  Matrix a;
  SpdMatrix b;
  double objective = 0.0;
  double grad_norm = 0.0;
  std::size_t iterations = 0;
  bool converged = false;
};

/// Maximises closed_form_J numerically from A = 0, B = I.
InnerAscentResult maximize_closed_form_J(const LinearGaussianTruth& truth, const SpdMatrix& u, double lambda,
                                         const SpdMatrix& sigma_x, std::size_t max_iters = 20000,
                                         double grad_tol = 1e-10);

struct OuterDescentResult {
  SpdMatrix u;
  double nll = 0.0;
  double grad_norm = 0.0;
  std::size_t iterations = 0;
  bool converged = false;
};

/// Minimises the outer NLL at θ*(U) over full SPD U, starting from U = I.
OuterDescentResult minimize_outer_nll(const SpdMatrix& sigma, double lambda, std::size_t max_iters = 20000,
                                      double grad_tol = 1e-10);

}  // namespace nllpo
