#pragma once

#include <cmath>
#include <span>
#include <string_view>
#include <vector>

#include "nllpo/dataset.hpp"
#include "nllpo/models.hpp"
#include "nllpo/rng.hpp"
#include "nllpo/spd.hpp"
#include "nllpo/tape.hpp"

namespace nllpo {

inline constexpr double kLog2PiE = 2.8378770664093453;  // log(2πe)
inline constexpr double kLog2PiConst = 1.8378770664093453;

enum class RewardKind { kScalar, kDiagonal, kFull };

RewardKind parse_reward_kind(std::string_view name);
std::string_view to_string(RewardKind kind);

/// Parametrisation of the Mahalanobis reward r_U(ŷ, y) = -(ŷ-y)ᵀU(ŷ-y).
///   scalar:   raw = [log u],      U = u·I
///   diagonal: raw = log u_j,      U = diag(u)
///   full:     raw = L (n×n row-major, entries above the diagonal ignored), U = L·Lᵀ
class RewardParams {
 public:
  static RewardParams isotropic(std::size_t n, double u);
  static RewardParams diagonal(std::span<const double> u);
  static RewardParams full(const SpdMatrix& u);
  static RewardParams from_raw(RewardKind kind, std::size_t n, Vector raw);

  RewardKind kind() const noexcept { return kind_; }
  std::size_t dim() const noexcept { return dim_; }
  const Vector& raw() const noexcept { return raw_; }
  Vector& raw() noexcept { return raw_; }

  SpdMatrix realized() const;
  /// u for the scalar kind; throws otherwise.
  double scalar() const;

  friend bool operator==(const RewardParams&, const RewardParams&) = default;

 private:
  RewardParams(RewardKind kind, std::size_t n, Vector raw);

  RewardKind kind_ = RewardKind::kScalar;
  std::size_t dim_ = 0;
  Vector raw_;
};

/// Reward parameters placed on a tape: `raw` is a leaf when differentiated
/// through, or a constant.
struct RewardVar {
  RewardKind kind = RewardKind::kScalar;
  std::size_t dim = 0;
  Var raw;
};

enum class Estimator { kReparameterized, kScoreFunction };

struct PgConfig {
  double lambda = 1.0;
  std::size_t mc_samples = 8;
  Estimator estimator = Estimator::kReparameterized;

  void validate() const;
};

/// Standard-normal noise for S Monte-Carlo draws over a batch: S matrices B×n.
using NoiseDraws = std::vector<Matrix>;
NoiseDraws draw_noise(std::size_t rows, std::size_t dim, std::size_t samples, Rng& rng);

Matrix lower_mask(std::size_t n);

template <class T>
RewardVar reward_constant(Tape<T>& tape, const RewardParams& r) {
  return {r.kind(), r.dim(), tape.constant(Matrix(r.raw().size(), 1, r.raw()))};
}

/// Current numeric value of reward parameters placed on a tape.
template <class T>
RewardParams reward_values(const Tape<T>& tape, const RewardVar& reward) {
  const auto& raw = tape.value(reward.raw);
  Vector v(raw.size());
  for (std::size_t k = 0; k < v.size(); ++k) v[k] = value_of(raw[k]);
  return RewardParams::from_raw(reward.kind, reward.dim, std::move(v));
}

/// Row-wise dᵀUd for a B×n matrix of differences; returns B×1.
template <class T>
Var reward_penalty(Tape<T>& tape, const RewardVar& reward, Var diff) {
  const auto& d = tape.value(diff);
  if (d.cols() != reward.dim) throw Error(ErrorCode::kDimensionMismatch, "reward dim vs target dim");
  const std::size_t n = reward.dim;
  switch (reward.kind) {
    case RewardKind::kScalar:
      return tape.scale_by(tape.row_sum(tape.square(diff)), tape.exp(tape.slice(reward.raw, 0, 1, 1)));
    case RewardKind::kDiagonal:
      return tape.row_sum(tape.mul_row(tape.square(diff), tape.exp(tape.slice(reward.raw, 0, 1, n))));
    case RewardKind::kFull: {
      const Var l = tape.mul(tape.slice(reward.raw, 0, n, n), tape.constant(lower_mask(n)));
      return tape.row_sum(tape.square(tape.matmul(diff, l)));
    }
  }
  throw Error(ErrorCode::kUnsupportedPrimitive, "unknown reward kind");
}

/// Mean over the batch of Σ_j ½(log 2πe + logvar_j): analytic entropy of a
/// diagonal Gaussian head.
template <class T>
Var gaussian_entropy_term(Tape<T>& tape, Var logvar) {
  const auto& lv = tape.value(logvar);
  const double rows = static_cast<double>(lv.rows());
  return tape.add_scalar(tape.scale(tape.sum(logvar), 0.5 / rows),
                         0.5 * kLog2PiE * static_cast<double>(lv.cols()));
}

template <class T>
Var nll_loss(Tape<T>& tape, const GaussianPolicy& policy, Var params, const Batch& batch) {
  if (batch.size() == 0) throw Error(ErrorCode::kEmptyBatch, "nll_loss on empty batch");
  if (batch.y.cols() != policy.output_dim()) throw Error(ErrorCode::kDimensionMismatch, "nll target dim");
  const GaussianHeads h = policy.forward(tape, params, batch.x);
  const Var resid = tape.sub(tape.constant(batch.y), h.mean);
  const Var scaled = tape.mul(tape.square(resid), tape.exp(tape.neg(h.logvar)));
  const Var total = tape.add(scaled, h.logvar);
  const double rows = static_cast<double>(batch.size());
  return tape.add_scalar(tape.scale(tape.sum(total), 0.5 / rows),
                         0.5 * kLog2PiConst * static_cast<double>(policy.output_dim()));
}

template <class T>
Var nll_loss(Tape<T>& tape, const CategoricalPolicy& policy, Var params, const Batch& batch) {
  if (batch.size() == 0) throw Error(ErrorCode::kEmptyBatch, "nll_loss on empty batch");
  if (batch.classes != policy.classes()) throw Error(ErrorCode::kDimensionMismatch, "class count");
  const Var lp = policy.log_probs(tape, params, batch.x);
  return tape.scale(tape.sum(tape.mul(lp, tape.constant(batch.one_hot()))),
                    -1.0 / static_cast<double>(batch.size()));
}

template <class T>
Var mse_loss(Tape<T>& tape, const GaussianPolicy& policy, Var params, const Batch& batch) {
  if (batch.size() == 0) throw Error(ErrorCode::kEmptyBatch, "mse_loss on empty batch");
  if (batch.y.cols() != policy.output_dim()) throw Error(ErrorCode::kDimensionMismatch, "mse target dim");
  const GaussianHeads h = policy.forward(tape, params, batch.x);
  const Var resid = tape.sub(h.mean, tape.constant(batch.y));
  return tape.scale(tape.sum(tape.square(resid)), 1.0 / static_cast<double>(batch.size()));
}

/// Negated entropy-regularised policy-gradient objective for a Gaussian policy
/// with fixed noise draws:
///   (1/B) Σ_i [ (1/S) Σ_s (ŷ_is - y_i)ᵀU(ŷ_is - y_i) - λ H(p_θ(·|x_i)) ].
/// Reparameterised: ŷ_is = μ(x_i) + σ(x_i) ⊙ z_is and gradients flow through
/// μ and σ. Score-function: ŷ is held fixed and the returned surrogate has the
/// same gradient in expectation (its value is not the objective).
template <class T>
Var pg_loss_gaussian(Tape<T>& tape, const GaussianPolicy& policy, Var params, const Batch& batch,
                     const RewardVar& reward, const PgConfig& cfg, const NoiseDraws& noise) {
  cfg.validate();
  if (batch.size() == 0) throw Error(ErrorCode::kEmptyBatch, "pg_loss on empty batch");
  const std::size_t n = policy.output_dim();
  if (reward.dim != n || batch.y.cols() != n) throw Error(ErrorCode::kDimensionMismatch, "pg_loss dims");
  if (noise.empty()) throw Error(ErrorCode::kConfigError, "pg_loss needs at least one noise draw");
  const std::size_t rows = batch.size();
  const double samples = static_cast<double>(noise.size());
  const GaussianHeads h = policy.forward(tape, params, batch.x);
  const Var targets = tape.constant(batch.y);
  const Var entropy = gaussian_entropy_term(tape, h.logvar);

  if (cfg.estimator == Estimator::kReparameterized) {
    const Var sigma = tape.exp(tape.scale(h.logvar, 0.5));
    Var acc{};
    for (const Matrix& z : noise) {
      if (z.rows() != rows || z.cols() != n) throw Error(ErrorCode::kDimensionMismatch, "noise shape");
      const Var yhat = tape.add(h.mean, tape.mul(sigma, tape.constant(z)));
      const Var pen = reward_penalty(tape, reward, tape.sub(yhat, targets));
      acc = acc.id < 0 ? pen : tape.add(acc, pen);
    }
    const Var reward_term = tape.scale(tape.sum(acc), 1.0 / (static_cast<double>(rows) * samples));
    return tape.sub(reward_term, tape.scale(entropy, cfg.lambda));
  }

  // Score function: draws are constants; weight log p(ŷ) by (penalty - leave-one-out mean).
  const auto& mean_v = tape.value(h.mean);
  const auto& lv_v = tape.value(h.logvar);
  const SpdMatrix u = reward_values(tape, reward).realized();
  std::vector<Matrix> draws;
  std::vector<Vector> penalties;
  Vector d(n);
  for (const Matrix& z : noise) {
    Matrix yhat(rows, n);
    Vector pen(rows);
    for (std::size_t i = 0; i < rows; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        const std::size_t k = i * n + j;
        yhat[k] = value_of(mean_v[k]) + std::exp(0.5 * value_of(lv_v[k])) * z[k];
        d[j] = yhat[k] - batch.y[k];
      }
      pen[i] = quadratic_form(u, d);
    }
    penalties.push_back(std::move(pen));
    draws.push_back(std::move(yhat));
  }
  Var acc{};
  for (std::size_t s = 0; s < draws.size(); ++s) {
    Matrix weight(rows, 1);
    for (std::size_t i = 0; i < rows; ++i) {
      double baseline = 0.0;
      if (draws.size() > 1) {
        for (std::size_t t = 0; t < draws.size(); ++t) {
          if (t != s) baseline += penalties[t][i];
        }
        baseline /= samples - 1.0;
      }
      weight[i] = penalties[s][i] - baseline;
    }
    const Var resid = tape.sub(tape.constant(draws[s]), h.mean);
    const Var logp_rows = tape.scale(
        tape.row_sum(tape.add(tape.mul(tape.square(resid), tape.exp(tape.neg(h.logvar))), h.logvar)), -0.5);
    const Var term = tape.sum(tape.mul(logp_rows, tape.constant(weight)));
    acc = acc.id < 0 ? term : tape.add(acc, term);
  }
  const Var reward_term = tape.scale(acc, 1.0 / (static_cast<double>(rows) * samples));
  return tape.sub(reward_term, tape.scale(entropy, cfg.lambda));
}

template <class T>
Var pg_loss_gaussian(Tape<T>& tape, const GaussianPolicy& policy, Var params, const Batch& batch,
                     const RewardParams& reward, const PgConfig& cfg, Rng& rng) {
  const NoiseDraws noise = draw_noise(batch.size(), policy.output_dim(), cfg.mc_samples, rng);
  return pg_loss_gaussian(tape, policy, params, batch, reward_constant(tape, reward), cfg, noise);
}

/// r(ŷ, y) = -(e_ŷ - e_y)ᵀU(e_ŷ - e_y) for one-hot encodings.
double categorical_reward(const SpdMatrix& u, std::size_t predicted, std::size_t label);

/// REINFORCE surrogate for the softmax policy. Classes are sampled from the
/// current softmax; each draw's log-probability is weighted by its reward minus
/// the mean reward of the other draws for the same example (leave-one-out,
/// which keeps the estimator unbiased). The entropy term is analytic.
template <class T>
Var pg_loss_categorical(Tape<T>& tape, const CategoricalPolicy& policy, Var params, const Batch& batch,
                        const RewardParams& reward, const PgConfig& cfg, Rng& rng) {
  cfg.validate();
  if (batch.size() == 0) throw Error(ErrorCode::kEmptyBatch, "pg_loss on empty batch");
  const std::size_t k = policy.classes();
  if (reward.dim() != k || batch.classes != k) throw Error(ErrorCode::kDimensionMismatch, "pg_loss classes");
  const std::size_t rows = batch.size();
  const std::size_t samples = cfg.mc_samples;
  const SpdMatrix u = reward.realized();

  const Var lp = policy.log_probs(tape, params, batch.x);
  const auto& lp_v = tape.value(lp);
  Matrix weights(rows, k);
  Vector probs(k);
  std::vector<std::size_t> drawn(samples);
  Vector rewards(samples);
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t c = 0; c < k; ++c) probs[c] = std::exp(value_of(lp_v(i, c)));
    double total = 0.0;
    for (std::size_t s = 0; s < samples; ++s) {
      drawn[s] = rng.categorical(probs);
      rewards[s] = categorical_reward(u, drawn[s], batch.labels[i]);
      total += rewards[s];
    }
    for (std::size_t s = 0; s < samples; ++s) {
      const double baseline = samples > 1 ? (total - rewards[s]) / static_cast<double>(samples - 1) : 0.0;
      weights(i, drawn[s]) += (rewards[s] - baseline) / static_cast<double>(samples);
    }
  }
  const Var score = tape.sum(tape.mul(lp, tape.constant(weights)));
  // Σ_i H_i = -Σ_ic p_ic log p_ic
  const Var neg_entropy = tape.sum(tape.mul(tape.exp(lp), lp));
  const Var objective = tape.sub(score, tape.scale(neg_entropy, cfg.lambda));
  return tape.scale(objective, -1.0 / static_cast<double>(rows));
}

/// Closed-form expected objective of the linear-Gaussian inner problem:
///   J(A,B) = -Tr((A-Λ)ᵀU(A-Λ)Σ_X) - Tr(U(B+Σ)) + (λ/2) log(2πe det B).
/// The log term is written per dimension, (λ/2)(n log 2πe + log det B), which
/// is the entropy of N(AX, B).
double closed_form_J(const Matrix& a, const SpdMatrix& b, const LinearGaussianTruth& truth,
                     const SpdMatrix& u, double lambda, const SpdMatrix& sigma_x);

/// KL(N(0,B) ‖ N(0,Σ)) = ½[Tr(Σ⁻¹B) - n + ln(det Σ / det B)].
double reverse_kl_gaussian(const SpdMatrix& b, const SpdMatrix& sigma);

}  // namespace nllpo
