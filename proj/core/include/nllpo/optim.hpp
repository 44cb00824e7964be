#pragma once

#include <functional>
#include <span>
#include <string>
#include <string_view>

#include "nllpo/matrix.hpp"

namespace nllpo {

enum class OptimizerKind { kSgd, kAdam };

OptimizerKind parse_optimizer(std::string_view name);
std::string_view to_string(OptimizerKind kind);

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::kSgd;
  double lr = 1e-2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// First-order minimiser holding its own moment state.
class Optimizer {
 public:
  Optimizer(OptimizerConfig cfg, std::size_t dim);

  void step(std::span<double> params, std::span<const double> grad);
  void reset();
  const OptimizerConfig& config() const noexcept { return cfg_; }
  std::size_t steps() const noexcept { return t_; }

 private:
  OptimizerConfig cfg_;
  Vector m_;
  Vector v_;
  std::size_t t_ = 0;
};

struct DescentResult {
  Vector x;
  double value = 0.0;
  double grad_norm = 0.0;
  std::size_t iterations = 0;
  bool converged = false;
};

/// Deterministic gradient descent with Barzilai-Borwein step proposals and an
/// Armijo backtracking safeguard. For smooth, noise-free objectives.
DescentResult minimize_armijo(
    const std::function<std::pair<double, Vector>(std::span<const double>)>& value_and_grad,
    Vector x0, std::size_t max_iters, double grad_tol);

}  // namespace nllpo
