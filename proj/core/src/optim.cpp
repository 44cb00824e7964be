#include "nllpo/optim.hpp"

#include <algorithm>
#include <cmath>
#include <tuple>

#include "nllpo/error.hpp"

namespace nllpo {

OptimizerKind parse_optimizer(std::string_view name) {
  if (name == "sgd") return OptimizerKind::kSgd;
  if (name == "adam") return OptimizerKind::kAdam;
  throw Error(ErrorCode::kConfigError, "unknown optimizer '" + std::string(name) + "'");
}

std::string_view to_string(OptimizerKind kind) {
  return kind == OptimizerKind::kSgd ? "sgd" : "adam";
}

Optimizer::Optimizer(OptimizerConfig cfg, std::size_t dim)
    : cfg_(cfg), m_(dim, 0.0), v_(dim, 0.0) {
  if (!(cfg_.lr > 0.0)) throw Error(ErrorCode::kConfigError, "learning rate must be positive");
}

void Optimizer::step(std::span<double> params, std::span<const double> grad) {
  if (params.size() != grad.size() || params.size() != m_.size()) {
    throw Error(ErrorCode::kDimensionMismatch, "optimizer step");
  }
  ++t_;
  if (cfg_.kind == OptimizerKind::kSgd) {
    for (std::size_t i = 0; i < params.size(); ++i) params[i] -= cfg_.lr * grad[i];
    return;
  }
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * grad[i];
    v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * grad[i] * grad[i];
    const double mhat = m_[i] / bc1;
    const double vhat = v_[i] / bc2;
    params[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
  }
}

void Optimizer::reset() {
  std::fill(m_.begin(), m_.end(), 0.0);
  std::fill(v_.begin(), v_.end(), 0.0);
  t_ = 0;
}

DescentResult minimize_armijo(
    const std::function<std::pair<double, Vector>(std::span<const double>)>& value_and_grad,
    Vector x0, std::size_t max_iters, double grad_tol) {
  DescentResult res;
  res.x = std::move(x0);
  auto [f, g] = value_and_grad(res.x);
  double step = 1e-2;
  Vector x_prev;
  Vector g_prev;
  for (std::size_t it = 0; it < max_iters; ++it) {
    res.grad_norm = norm(g);
    if (res.grad_norm <= grad_tol) {
      res.converged = true;
      break;
    }
    if (!x_prev.empty()) {
      const Vector s = subtract(res.x, x_prev);
      const Vector y = subtract(g, g_prev);
      const double sy = dot(s, y);
      if (sy > 0.0) step = dot(s, s) / sy;
    }
    const double gg = res.grad_norm * res.grad_norm;
    Vector trial(res.x.size());
    double f_trial = 0.0;
    Vector g_trial;
    bool accepted = false;
    for (int backtrack = 0; backtrack < 60; ++backtrack) {
      for (std::size_t i = 0; i < trial.size(); ++i) trial[i] = res.x[i] - step * g[i];
      try {
        std::tie(f_trial, g_trial) = value_and_grad(trial);
      } catch (const Error&) {
        step *= 0.5;
        continue;
      }
      if (std::isfinite(f_trial) && f_trial <= f - 1e-4 * step * gg) {
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) break;
    x_prev = std::move(res.x);
    g_prev = std::move(g);
    res.x = std::move(trial);
    f = f_trial;
    g = std::move(g_trial);
    res.iterations = it + 1;
  }
  res.value = f;
  res.grad_norm = norm(g);
  res.converged = res.converged || res.grad_norm <= grad_tol;
  return res;
}

}  // namespace nllpo
