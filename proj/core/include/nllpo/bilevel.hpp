#pragma once

#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "nllpo/autodiff.hpp"
#include "nllpo/dataset.hpp"
#include "nllpo/models.hpp"
#include "nllpo/objectives.hpp"
#include "nllpo/optim.hpp"
#include "nllpo/rng.hpp"

namespace nllpo {

/// Which covariance feeds the heuristic reward: the raw targets, or the
/// residuals of a least-squares fit of targets on inputs.
enum class CovarianceMode { kRaw, kResidual };

CovarianceMode parse_covariance_mode(std::string_view name);
std::string_view to_string(CovarianceMode mode);

/// Unbiased sample covariance of the rows of `y` plus a 1e-6 ridge.
Matrix sample_covariance(const Matrix& y);

/// Scalar-isotropic reward u = λn / (2 Tr Σ̂) from the covariance of `targets`.
RewardParams heuristic_reward(const Matrix& targets, double lambda);
/// Same, from residuals of y ≈ [x, 1]·W fitted by least squares.
RewardParams heuristic_reward_residual(const Matrix& inputs, const Matrix& targets, double lambda);
/// Uses the train split; classification targets are one-hot encoded.
RewardParams heuristic_reward(const Dataset& data, double lambda, CovarianceMode mode = CovarianceMode::kRaw);

struct CgConfig {
  std::size_t max_iters = 100;
  double tol = 1e-5;    ///< relative to ‖rhs‖
  double damping = 0.0;  ///< solves (A + damping·I) x = rhs
};

struct CgResult {
  Vector solution;
  double residual = 0.0;  ///< ‖A x − rhs‖ / ‖rhs‖ (0 when rhs = 0)
  std::size_t iterations = 0;
  bool curvature_stop = false;  ///< stopped early on pᵀAp ≤ 0
};

using LinearOperator = std::function<Vector(std::span<const double>)>;

/// Conjugate gradients. Running out of iterations is reported, not fatal;
/// a non-finite iterate throws BreakdownNonFinite.
CgResult cg_solve(const LinearOperator& apply, std::span<const double> rhs, const CgConfig& cfg);

struct HypergradientConfig {
  CgConfig cg;
  double stationarity_tol = 1e-2;  ///< scaled by (1 + ‖θ‖)
};

struct HypergradientResult {
  Vector gradient;  ///< over φ
  double outer_value = 0.0;
  double inner_grad_norm = 0.0;
  bool stationary = true;
  CgResult cg;
};

/// Implicit-function hypergradient of L_out(θ*(φ)) where θ* is stationary for
/// L_in(φ, ·):  −∇_φ⟨∇_θ L_in(φ, θ*), v⟩  with  ∇²_θ L_in · v = ∇_θ L_out.
/// `inner` is `(tape, Var phi, Var theta)`, `outer` is `(tape, Var theta)`.
template <class InnerLoss, class OuterLoss>
HypergradientResult hypergradient(const InnerLoss& inner, const OuterLoss& outer, std::span<const double> phi,
                                  std::span<const double> theta, const HypergradientConfig& cfg) {
  HypergradientResult out;
  const ValueAndGradient inner_g = value_and_theta_gradient(inner, phi, theta);
  out.inner_grad_norm = norm(inner_g.gradient);
  out.stationary = out.inner_grad_norm <= cfg.stationarity_tol * (1.0 + norm(theta));

  const ValueAndGradient outer_g = value_and_gradient(outer, theta);
  out.outer_value = outer_g.value;
  const LinearOperator apply = [&](std::span<const double> v) {
    return joint_hvp(inner, phi, theta, v).theta_part;
  };
  out.cg = cg_solve(apply, outer_g.gradient, cfg.cg);
  if (norm(out.cg.solution) == 0.0) {
    out.gradient.assign(phi.size(), 0.0);
    return out;
  }
  out.gradient = scaled(cross_grad(inner, phi, theta, out.cg.solution), -1.0);
  return out;
}

struct BilevelConfig {
  std::size_t outer_iters = 100;
  std::size_t inner_iters = 50;
  double outer_lr = 1e-2;
  double inner_lr = 1e-2;
  OptimizerKind outer_optimizer = OptimizerKind::kSgd;
  OptimizerKind inner_optimizer = OptimizerKind::kSgd;
  std::size_t cg_max_iters = 0;  ///< 0 means min(dim θ, 100)
  double cg_tol = 1e-5;
  double cg_damping = 0.0;
  double lambda = 1.0;
  bool warm_start = true;
  std::size_t mc_samples = 8;
  Estimator estimator = Estimator::kReparameterized;
  std::size_t inner_batch = 0;  ///< rows per inner step; 0 = full train split
  std::size_t hyper_batch = 0;  ///< rows per hypergradient; 0 = full train split
  double stationarity_tol = 1e-2;

  void validate() const;
};

/// One record per outer iteration. `phi` holds the raw (log-space) reward
/// parameters; the hypergradient fields are absent on the final record, which
/// only reports the policy trained at the final reward.
struct BilevelRecord {
  std::size_t iter = 0;
  Vector phi;
  double outer_nll = 0.0;
  std::optional<double> hypergrad_norm;
  std::optional<double> cg_residual;
  std::optional<std::size_t> cg_iterations;
  bool stationarity_violated = false;
};

struct BilevelTrace {
  std::vector<BilevelRecord> records;

  void append(BilevelRecord r);
  void write_jsonl(std::ostream& out) const;
  void write_jsonl(const std::filesystem::path& path) const;
};

struct BilevelResult {
  RewardParams reward;
  GaussianPolicy policy;
  BilevelTrace trace;
  std::optional<std::string> failure;  ///< set when a non-finite loss aborted the loop
};

/// Alternates an inner phase of `inner_iters` PG steps at the current reward
/// with one hypergradient step on φ (log-space) for the NLL on the train split.
/// A last inner phase runs at the final reward, so `outer_iters = 0` is plain
/// PG training at `reward_init`.
BilevelResult solve_bilevel(const Dataset& data, GaussianPolicy policy, RewardParams reward_init,
                            const BilevelConfig& cfg, Rng& rng);

}  // namespace nllpo
