#include "nllpo/bilevel.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <ostream>

#include "json.hpp"

namespace nllpo {

CovarianceMode parse_covariance_mode(std::string_view name) {
  if (name == "raw") return CovarianceMode::kRaw;
  if (name == "residual") return CovarianceMode::kResidual;
  throw Error(ErrorCode::kConfigError, "unknown covariance mode '" + std::string(name) + "'");
}

std::string_view to_string(CovarianceMode mode) {
  return mode == CovarianceMode::kRaw ? "raw" : "residual";
}

namespace {

constexpr double kRidge = 1e-6;

Matrix centred_gram(const Matrix& y, double divisor) {
  const std::size_t rows = y.rows();
  const std::size_t n = y.cols();
  Vector mean(n, 0.0);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < n; ++j) mean[j] += y(i, j);
  for (double& v : mean) v /= static_cast<double>(rows);
  Matrix c(n, n);
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t a = 0; a < n; ++a) {
      const double da = y(i, a) - mean[a];
      for (std::size_t b = a; b < n; ++b) c(a, b) += da * (y(i, b) - mean[b]);
    }
  }
  for (std::size_t a = 0; a < n; ++a) {
    for (std::size_t b = a; b < n; ++b) {
      c(a, b) /= divisor;
      c(b, a) = c(a, b);
    }
    c(a, a) += kRidge;
  }
  return c;
}

RewardParams isotropic_from_covariance(const Matrix& cov, double lambda) {
  if (!(lambda > 0.0)) throw Error(ErrorCode::kConfigError, "lambda must be > 0");
  const double n = static_cast<double>(cov.rows());
  return RewardParams::isotropic(cov.rows(), lambda * n / (2.0 * trace(cov)));
}

}  // namespace

Matrix sample_covariance(const Matrix& y) {
  if (y.rows() < 2) throw Error(ErrorCode::kTooFewSamples, "covariance needs at least 2 samples");
  if (y.cols() == 0) throw Error(ErrorCode::kDimensionMismatch, "covariance of zero-width targets");
  return centred_gram(y, static_cast<double>(y.rows() - 1));
}

RewardParams heuristic_reward(const Matrix& targets, double lambda) {
  return isotropic_from_covariance(sample_covariance(targets), lambda);
}

RewardParams heuristic_reward_residual(const Matrix& inputs, const Matrix& targets, double lambda) {
  const std::size_t rows = inputs.rows();
  const std::size_t p = inputs.cols() + 1;
  if (targets.rows() != rows) throw Error(ErrorCode::kDimensionMismatch, "residual covariance rows");
  if (rows < p + 1) throw Error(ErrorCode::kTooFewSamples, "residual covariance needs more rows than inputs + 1");
  Matrix design(rows, p);
  for (std::size_t i = 0; i < rows; ++i) {
    std::copy_n(inputs.row(i).begin(), p - 1, design.row(i).begin());
    design(i, p - 1) = 1.0;
  }
  const Matrix dt = transpose(design);
  Matrix gram = matmul(dt, design);
  for (std::size_t k = 0; k < p; ++k) gram(k, k) += 1e-10 * std::max(1.0, gram(k, k));
  const SpdMatrix g = cholesky(gram);
  const Matrix rhs = matmul(dt, targets);
  Matrix w(p, targets.cols());
  Vector col(p);
  for (std::size_t j = 0; j < targets.cols(); ++j) {
    for (std::size_t k = 0; k < p; ++k) col[k] = rhs(k, j);
    const Vector sol = g.solve(col);
    for (std::size_t k = 0; k < p; ++k) w(k, j) = sol[k];
  }
  const Matrix resid = sub(targets, matmul(design, w));
  return isotropic_from_covariance(centred_gram(resid, static_cast<double>(rows - p)), lambda);
}

RewardParams heuristic_reward(const Dataset& data, double lambda, CovarianceMode mode) {
  const Batch train = data.split(Split::kTrain);
  const Matrix y = train.categorical() ? train.one_hot() : train.y;
  return mode == CovarianceMode::kRaw ? heuristic_reward(y, lambda)
                                      : heuristic_reward_residual(train.x, y, lambda);
}

CgResult cg_solve(const LinearOperator& apply, std::span<const double> rhs, const CgConfig& cfg) {
  const std::size_t d = rhs.size();
  CgResult out;
  out.solution.assign(d, 0.0);
  const double bnorm = norm(rhs);
  if (bnorm == 0.0) return out;
  if (!std::isfinite(bnorm)) throw Error(ErrorCode::kBreakdownNonFinite, "cg: non-finite right-hand side");

  Vector r(rhs.begin(), rhs.end());
  Vector p = r;
  double rs = dot(r, r);
  out.residual = 1.0;
  for (std::size_t k = 0; k < cfg.max_iters; ++k) {
    Vector ap = apply(p);
    if (ap.size() != d) throw Error(ErrorCode::kDimensionMismatch, "cg: operator output length");
    if (cfg.damping != 0.0) axpy(cfg.damping, p, ap);
    const double pap = dot(p, ap);
    if (!std::isfinite(pap)) throw Error(ErrorCode::kBreakdownNonFinite, "cg: non-finite curvature");
    if (pap <= 0.0) {
      // indefinite direction: keep what we have (steepest descent on the first step)
      if (k == 0) out.solution = Vector(rhs.begin(), rhs.end());
      out.curvature_stop = true;
      break;
    }
    const double alpha = rs / pap;
    axpy(alpha, p, out.solution);
    axpy(-alpha, ap, r);
    out.iterations = k + 1;
    if (!all_finite(out.solution)) throw Error(ErrorCode::kBreakdownNonFinite, "cg: non-finite iterate");
    const double rs_new = dot(r, r);
    out.residual = std::sqrt(rs_new) / bnorm;
    if (out.residual <= cfg.tol) break;
    const double beta = rs_new / rs;
    for (std::size_t i = 0; i < d; ++i) p[i] = r[i] + beta * p[i];
    rs = rs_new;
  }
  return out;
}

void BilevelConfig::validate() const {
  auto bad = [](const char* what) { throw Error(ErrorCode::kConfigError, std::string("bilevel: ") + what); };
  if (inner_iters == 0) bad("inner_iters must be >= 1");
  if (!(outer_lr > 0.0) || !(inner_lr > 0.0)) bad("learning rates must be > 0");
  if (!(cg_tol > 0.0 && cg_tol < 1.0)) bad("cg_tol must lie in (0, 1)");
  if (!(cg_damping >= 0.0)) bad("cg_damping must be >= 0");
  if (!(lambda > 0.0)) bad("lambda must be > 0");
  if (mc_samples == 0) bad("mc_samples must be >= 1");
  if (!(stationarity_tol > 0.0)) bad("stationarity_tol must be > 0");
}

void BilevelTrace::append(BilevelRecord r) {
  if (!std::isfinite(r.outer_nll)) throw Error(ErrorCode::kNonFiniteLoss, "trace record with non-finite NLL");
  records.push_back(std::move(r));
}

void BilevelTrace::write_jsonl(std::ostream& out) const {
  for (const auto& r : records) {
    nlohmann::ordered_json j;
    j["iter"] = r.iter;
    j["phi"] = r.phi;
    j["outer_nll"] = r.outer_nll;
    j["hypergrad_norm"] = r.hypergrad_norm ? nlohmann::ordered_json(*r.hypergrad_norm) : nullptr;
    j["cg_residual"] = r.cg_residual ? nlohmann::ordered_json(*r.cg_residual) : nullptr;
    j["cg_iterations"] = r.cg_iterations ? nlohmann::ordered_json(*r.cg_iterations) : nullptr;
    j["stationarity_violated"] = r.stationarity_violated;
    out << j.dump() << '\n';
  }
}

void BilevelTrace::write_jsonl(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::kIoError, "cannot write " + path.string());
  write_jsonl(out);
}

namespace {

Batch sample_rows(const Dataset& data, std::size_t count, Rng& rng) {
  const auto& train = data.train;
  if (count == 0 || count >= train.size()) return data.split(Split::kTrain);
  std::vector<std::size_t> rows(count);
  for (auto& r : rows) r = train[rng.index(train.size())];
  return data.batch(rows);
}

double nll_value(const GaussianPolicy& policy, const Batch& batch) {
  Tape<double> tape;
  const Var p = tape.leaf(std::span<const double>(policy.params().values()));
  return tape.scalar(nll_loss(tape, policy, p, batch));
}

}  // namespace

BilevelResult solve_bilevel(const Dataset& data, GaussianPolicy policy, RewardParams reward_init,
                            const BilevelConfig& cfg, Rng& rng) {
  cfg.validate();
  if (reward_init.kind() == RewardKind::kFull) {
    throw Error(ErrorCode::kConfigError, "solve_bilevel supports scalar and diagonal rewards only");
  }
  if (data.task != TaskKind::kRegression) throw Error(ErrorCode::kConfigError, "solve_bilevel needs regression data");
  const std::size_t n = policy.output_dim();
  if (reward_init.dim() != n || data.target_dim() != n || data.input_dim() != policy.input_dim()) {
    throw Error(ErrorCode::kDimensionMismatch, "solve_bilevel: data, policy and reward dims");
  }
  if (data.train.size() < 2) throw Error(ErrorCode::kTooFewSamples, "solve_bilevel: train split too small");

  const RewardKind kind = reward_init.kind();
  const std::size_t dim_theta = policy.params().size();
  const Vector theta0 = policy.params().values();
  Vector phi = reward_init.raw();

  Optimizer inner_opt({cfg.inner_optimizer, cfg.inner_lr}, dim_theta);
  Optimizer outer_opt({cfg.outer_optimizer, cfg.outer_lr}, phi.size());
  const PgConfig pg{cfg.lambda, cfg.mc_samples, cfg.estimator};
  HypergradientConfig hcfg;
  hcfg.cg = {cfg.cg_max_iters == 0 ? std::min<std::size_t>(dim_theta, 100) : cfg.cg_max_iters, cfg.cg_tol,
             cfg.cg_damping};
  hcfg.stationarity_tol = cfg.stationarity_tol;
  const Batch train = data.split(Split::kTrain);

  auto inner_phase = [&] {
    if (!cfg.warm_start) {
      policy.params().values() = theta0;
      inner_opt.reset();
    }
    const RewardParams reward = RewardParams::from_raw(kind, n, phi);
    for (std::size_t it = 0; it < cfg.inner_iters; ++it) {
      const Batch batch = sample_rows(data, cfg.inner_batch, rng);
      const NoiseDraws noise = draw_noise(batch.size(), n, cfg.mc_samples, rng);
      auto loss = [&](auto& tape, Var p) {
        return pg_loss_gaussian(tape, policy, p, batch, reward_constant(tape, reward), pg, noise);
      };
      const Vector g = gradient(loss, policy.params().values());
      inner_opt.step(policy.params().values(), g);
      policy.project();
    }
  };

  BilevelResult result{reward_init, policy, {}, std::nullopt};
  try {
    for (std::size_t t = 0;; ++t) {
      inner_phase();
      BilevelRecord rec;
      rec.iter = t;
      rec.phi = phi;
      rec.outer_nll = nll_value(policy, train);
      if (t == cfg.outer_iters) {
        result.trace.append(std::move(rec));
        break;
      }
      const Batch hb = sample_rows(data, cfg.hyper_batch, rng);
      const NoiseDraws noise = draw_noise(hb.size(), n, cfg.mc_samples, rng);
      auto inner = [&](auto& tape, Var ph, Var th) {
        return pg_loss_gaussian(tape, policy, th, hb, RewardVar{kind, n, ph}, pg, noise);
      };
      auto outer = [&](auto& tape, Var th) { return nll_loss(tape, policy, th, hb); };
      const HypergradientResult h = hypergradient(inner, outer, phi, policy.params().values(), hcfg);
      rec.hypergrad_norm = norm(h.gradient);
      rec.cg_residual = h.cg.residual;
      rec.cg_iterations = h.cg.iterations;
      rec.stationarity_violated = !h.stationary;
      result.trace.append(std::move(rec));
      if (!all_finite(h.gradient)) throw Error(ErrorCode::kNonFiniteLoss, "non-finite hypergradient");
      outer_opt.step(phi, h.gradient);
    }
  } catch (const Error& e) {
    if (e.code() != ErrorCode::kNonFiniteLoss && e.code() != ErrorCode::kBreakdownNonFinite) throw;
    result.failure = e.what();
  }
  if (all_finite(phi)) result.reward = RewardParams::from_raw(kind, n, phi);
  result.policy = policy;
  return result;
}

}  // namespace nllpo
