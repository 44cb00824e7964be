#include "nllpo/harness.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <numeric>
#include <ostream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "nllpo/autodiff.hpp"
#include "nllpo/closed_form.hpp"
#include "nllpo/error.hpp"

namespace nllpo {

namespace {

using ojson = nlohmann::ordered_json;

Error config_error(const std::string& what) { return Error(ErrorCode::kConfigError, what); }

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

double to_double(std::string_view key, std::string_view v) {
  v = trim(v);
  double out = 0.0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size() || !std::isfinite(out)) {
    throw config_error(std::string(key) + ": expected a number, got '" + std::string(v) + "'");
  }
  return out;
}

std::size_t to_size(std::string_view key, std::string_view v) {
  v = trim(v);
  std::size_t out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) {
    throw config_error(std::string(key) + ": expected a non-negative integer, got '" + std::string(v) + "'");
  }
  return out;
}

bool to_bool(std::string_view key, std::string_view v) {
  v = trim(v);
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw config_error(std::string(key) + ": expected true/false, got '" + std::string(v) + "'");
}

std::vector<std::string> to_list(std::string_view v) {
  std::vector<std::string> out;
  v = trim(v);
  if (v.empty()) return out;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = v.find(',', start);
    const std::string_view item = trim(v.substr(start, comma == std::string_view::npos ? v.npos : comma - start));
    if (item.empty()) throw config_error("empty item in list '" + std::string(v) + "'");
    out.emplace_back(item);
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

std::string join(const std::vector<std::string>& items) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) out += (i ? "," : "") + items[i];
  return out;
}

MeanHead parse_mean_head(std::string_view v) {
  if (v == "linear") return MeanHead::kLinear;
  if (v == "mlp") return MeanHead::kMlp;
  throw config_error("mean_head must be linear or mlp");
}
VarianceHead parse_variance_head(std::string_view v) {
  if (v == "constant") return VarianceHead::kConstant;
  if (v == "mlp") return VarianceHead::kMlp;
  throw config_error("variance_head must be constant or mlp");
}
Estimator parse_estimator(std::string_view v) {
  if (v == "reparam") return Estimator::kReparameterized;
  if (v == "score") return Estimator::kScoreFunction;
  throw config_error("estimator must be reparam or score");
}

struct Key {
  std::string name;
  std::function<void(RunConfig&, std::string_view)> set;
  std::function<std::string(const RunConfig&)> get;
};

#define NLLPO_SIZE_KEY(field) \
  Key{#field, [](RunConfig& c, std::string_view v) { c.field = to_size(#field, v); }, \
      [](const RunConfig& c) { return std::to_string(c.field); }}
#define NLLPO_DOUBLE_KEY(field) \
  Key{#field, [](RunConfig& c, std::string_view v) { c.field = to_double(#field, v); }, \
      [](const RunConfig& c) { return fmt_double(c.field); }}

const std::vector<Key>& keys() {
  static const std::vector<Key> table = {
      {"experiment", [](RunConfig& c, std::string_view v) { c.experiment = parse_experiment(v); },
       [](const RunConfig& c) { return std::string(to_string(c.experiment)); }},
      {"loss", [](RunConfig& c, std::string_view v) { c.loss = parse_loss(v); },
       [](const RunConfig& c) { return std::string(to_string(c.loss)); }},
      NLLPO_SIZE_KEY(out_dim),
      NLLPO_SIZE_KEY(in_dim),
      NLLPO_SIZE_KEY(samples),
      NLLPO_DOUBLE_KEY(beta),
      NLLPO_SIZE_KEY(classes),
      NLLPO_SIZE_KEY(features),
      NLLPO_DOUBLE_KEY(separation),
      NLLPO_DOUBLE_KEY(imbalance),
      NLLPO_SIZE_KEY(state_dim),
      NLLPO_SIZE_KEY(action_dim),
      {"csv_path", [](RunConfig& c, std::string_view v) { c.csv_path = std::string(trim(v)); },
       [](const RunConfig& c) { return c.csv_path; }},
      {"csv_features", [](RunConfig& c, std::string_view v) { c.csv_features = to_list(v); },
       [](const RunConfig& c) { return join(c.csv_features); }},
      {"csv_targets", [](RunConfig& c, std::string_view v) { c.csv_targets = to_list(v); },
       [](const RunConfig& c) { return join(c.csv_targets); }},
      {"mean_head", [](RunConfig& c, std::string_view v) { c.mean_head = parse_mean_head(trim(v)); },
       [](const RunConfig& c) { return std::string(c.mean_head == MeanHead::kLinear ? "linear" : "mlp"); }},
      {"variance_head", [](RunConfig& c, std::string_view v) { c.variance_head = parse_variance_head(trim(v)); },
       [](const RunConfig& c) {
         return std::string(c.variance_head == VarianceHead::kConstant ? "constant" : "mlp");
       }},
      {"hidden",
       [](RunConfig& c, std::string_view v) {
         c.hidden.clear();
         for (const auto& s : to_list(v)) c.hidden.push_back(to_size("hidden", s));
       },
       [](const RunConfig& c) {
         std::vector<std::string> s;
         for (auto h : c.hidden) s.push_back(std::to_string(h));
         return join(s);
       }},
      {"optimizer", [](RunConfig& c, std::string_view v) { c.optimizer = parse_optimizer(trim(v)); },
       [](const RunConfig& c) { return std::string(to_string(c.optimizer)); }},
      NLLPO_DOUBLE_KEY(lr),
      NLLPO_SIZE_KEY(epochs),
      NLLPO_SIZE_KEY(batch_size),
      NLLPO_DOUBLE_KEY(lambda),
      NLLPO_SIZE_KEY(mc_samples),
      {"estimator", [](RunConfig& c, std::string_view v) { c.estimator = parse_estimator(trim(v)); },
       [](const RunConfig& c) {
         return std::string(c.estimator == Estimator::kReparameterized ? "reparam" : "score");
       }},
      {"heuristic_covariance",
       [](RunConfig& c, std::string_view v) { c.heuristic_covariance = parse_covariance_mode(trim(v)); },
       [](const RunConfig& c) { return std::string(to_string(c.heuristic_covariance)); }},
      NLLPO_SIZE_KEY(bilevel_outer_iters),
      NLLPO_SIZE_KEY(bilevel_inner_iters),
      NLLPO_DOUBLE_KEY(bilevel_outer_lr),
      NLLPO_DOUBLE_KEY(bilevel_inner_lr),
      {"bilevel_optimizer", [](RunConfig& c, std::string_view v) { c.bilevel_optimizer = parse_optimizer(trim(v)); },
       [](const RunConfig& c) { return std::string(to_string(c.bilevel_optimizer)); }},
      NLLPO_SIZE_KEY(hyper_batch),
      NLLPO_SIZE_KEY(cg_max_iters),
      NLLPO_DOUBLE_KEY(cg_damping),
      NLLPO_DOUBLE_KEY(reward_init),
      NLLPO_DOUBLE_KEY(u_min),
      NLLPO_DOUBLE_KEY(u_max),
      NLLPO_SIZE_KEY(u_points),
      NLLPO_SIZE_KEY(check_instances),
      {"seed",
       [](RunConfig& c, std::string_view v) {
         v = trim(v);
         std::uint64_t out = 0;
         const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
         if (ec != std::errc() || p != v.data() + v.size()) throw config_error("seed: expected an integer");
         c.seed = out;
       },
       [](const RunConfig& c) { return std::to_string(c.seed); }},
      NLLPO_SIZE_KEY(seeds),
      {"out_dir", [](RunConfig& c, std::string_view v) { c.out_dir = std::string(trim(v)); },
       [](const RunConfig& c) { return c.out_dir; }},
      {"record_timing", [](RunConfig& c, std::string_view v) { c.record_timing = to_bool("record_timing", v); },
       [](const RunConfig& c) { return std::string(c.record_timing ? "true" : "false"); }},
  };
  return table;
}

#undef NLLPO_SIZE_KEY
#undef NLLPO_DOUBLE_KEY

bool is_pg(LossKind k) {
  return k == LossKind::kPgIdentity || k == LossKind::kPgHeuristic || k == LossKind::kPgImplicit;
}

bool numerical_failure(const Error& e) {
  return e.code() == ErrorCode::kNonFiniteLoss || e.code() == ErrorCode::kBreakdownNonFinite;
}

double elapsed_ms(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
}

std::vector<std::vector<std::size_t>> epoch_batches(const std::vector<std::size_t>& train, std::size_t batch_size,
                                                    Rng& rng) {
  std::vector<std::size_t> order = train;
  rng.shuffle(order.begin(), order.end());
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    const std::size_t stop = std::min(order.size(), start + batch_size);
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                     order.begin() + static_cast<std::ptrdiff_t>(stop));
  }
  return out;
}

struct FitResult {
  std::vector<MetricsRecord> metrics;
  std::optional<std::string> failure;
};

// Trains `policy` in place with the given loss; `reward` is used by the pg losses.
FitResult fit_gaussian(const RunConfig& cfg, const Dataset& data, GaussianPolicy& policy, const RewardParams& reward,
                       Rng& rng, const LinearGaussianTruth* truth) {
  const auto t0 = std::chrono::steady_clock::now();
  const Batch train = data.split(Split::kTrain);
  const Batch val = data.split(Split::kVal);
  const PgConfig pg{cfg.lambda, cfg.mc_samples, cfg.estimator};
  Optimizer opt({cfg.optimizer, cfg.lr}, policy.params().size());

  auto record = [&](std::size_t epoch) {
    MetricsRecord r;
    r.epoch = epoch;
    r.train_nll = gaussian_nll(policy, train);
    if (val.size() > 0) {
      r.val_nll = gaussian_nll(policy, val);
      r.val_mse = gaussian_mse(policy, val);
      if (truth) {
        const Moments m = evaluate_moments(policy, *truth, val.x);
        r.mean_err = m.mean_err;
        r.var_err = m.var_err;
      }
    }
    if (cfg.record_timing) r.wall_ms = elapsed_ms(t0);
    r.check_finite();
    return r;
  };

  FitResult out;
  try {
    out.metrics.push_back(record(0));
    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
      for (const auto& rows : epoch_batches(data.train, cfg.batch_size, rng)) {
        const Batch b = data.batch(rows);
        ValueAndGradient vg;
        switch (cfg.loss) {
          case LossKind::kNll:
            vg = value_and_gradient([&](auto& tape, Var p) { return nll_loss(tape, policy, p, b); },
                                    policy.params().values());
            break;
          case LossKind::kMse:
            vg = value_and_gradient([&](auto& tape, Var p) { return mse_loss(tape, policy, p, b); },
                                    policy.params().values());
            break;
          default: {
            const NoiseDraws noise = draw_noise(b.size(), policy.output_dim(), cfg.mc_samples, rng);
            vg = value_and_gradient(
                [&](auto& tape, Var p) {
                  return pg_loss_gaussian(tape, policy, p, b, reward_constant(tape, reward), pg, noise);
                },
                policy.params().values());
          }
        }
        if (!std::isfinite(vg.value) || !all_finite(vg.gradient)) {
          throw Error(ErrorCode::kNonFiniteLoss, "epoch " + std::to_string(epoch) + ": non-finite loss or gradient");
        }
        opt.step(policy.params().values(), vg.gradient);
        policy.project();
      }
      out.metrics.push_back(record(epoch));
    }
  } catch (const Error& e) {
    if (!numerical_failure(e)) throw;
    out.failure = e.what();
  }
  return out;
}

FitResult fit_categorical(const RunConfig& cfg, const Dataset& data, CategoricalPolicy& policy,
                          const RewardParams& reward, Rng& rng) {
  const auto t0 = std::chrono::steady_clock::now();
  const Batch train = data.split(Split::kTrain);
  const Batch val = data.split(Split::kVal);
  const PgConfig pg{cfg.lambda, cfg.mc_samples, cfg.estimator};
  Optimizer opt({cfg.optimizer, cfg.lr}, policy.params().size());

  auto record = [&](std::size_t epoch) {
    MetricsRecord r;
    r.epoch = epoch;
    r.train_nll = categorical_nll(policy, train);
    if (val.size() > 0) {
      r.val_nll = categorical_nll(policy, val);
      const ClassifierScores s = evaluate_classifier(policy, val);
      r.accuracy = s.accuracy;
      r.auc = s.auc;
    }
    if (cfg.record_timing) r.wall_ms = elapsed_ms(t0);
    r.check_finite();
    return r;
  };

  FitResult out;
  try {
    out.metrics.push_back(record(0));
    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
      for (const auto& rows : epoch_batches(data.train, cfg.batch_size, rng)) {
        const Batch b = data.batch(rows);
        ValueAndGradient vg;
        switch (cfg.loss) {
          case LossKind::kNll:
            vg = value_and_gradient([&](auto& tape, Var p) { return nll_loss(tape, policy, p, b); },
                                    policy.params().values());
            break;
          case LossKind::kMse: {
            // Brier score: squared distance of the probability vector from the one-hot label
            const Matrix onehot = b.one_hot();
            vg = value_and_gradient(
                [&](auto& tape, Var p) {
                  const Var probs = tape.exp(policy.log_probs(tape, p, b.x));
                  return tape.scale(tape.sum(tape.square(tape.sub(probs, tape.constant(onehot)))),
                                    1.0 / static_cast<double>(b.size()));
                },
                policy.params().values());
            break;
          }
          default:
            vg = value_and_gradient(
                [&](auto& tape, Var p) { return pg_loss_categorical(tape, policy, p, b, reward, pg, rng); },
                policy.params().values());
        }
        if (!std::isfinite(vg.value) || !all_finite(vg.gradient)) {
          throw Error(ErrorCode::kNonFiniteLoss, "epoch " + std::to_string(epoch) + ": non-finite loss or gradient");
        }
        opt.step(policy.params().values(), vg.gradient);
      }
      out.metrics.push_back(record(epoch));
    }
  } catch (const Error& e) {
    if (!numerical_failure(e)) throw;
    out.failure = e.what();
  }
  return out;
}

Instability assess_gaussian(const GaussianPolicy& policy, const Dataset& data, const FitResult& fit) {
  Instability s;
  s.non_finite = fit.failure.has_value();
  const Batch val = data.split(Split::kVal);
  if (val.size() > 0 && all_finite(policy.params().values())) {
    const auto pred = policy.predict(val.x);
    std::size_t at_bound = 0;
    for (double lv : pred.logvar.data()) {
      if (lv <= kLogVarMin + 1e-9 || lv >= kLogVarMax - 1e-9) ++at_bound;
    }
    s.clamp_fraction = static_cast<double>(at_bound) / static_cast<double>(pred.logvar.size());
  }
  double best = std::numeric_limits<double>::infinity();
  for (const auto& r : fit.metrics) {
    if (r.val_nll) best = std::min(best, *r.val_nll);
  }
  if (!fit.metrics.empty() && fit.metrics.back().val_nll && std::isfinite(best)) {
    s.nll_rise = (*fit.metrics.back().val_nll - best) / static_cast<double>(policy.output_dim());
  }
  std::vector<std::string> why;
  if (s.non_finite) why.push_back("non-finite loss");
  if (s.clamp_fraction >= 0.5) why.push_back("log-variance clamp saturated");
  if (s.nll_rise > 1.0) why.push_back("val NLL diverged from its best");
  s.flagged = !why.empty();
  for (std::size_t i = 0; i < why.size(); ++i) s.reason += (i ? "; " : "") + why[i];
  return s;
}

SpdMatrix random_spd(std::size_t n, Rng& rng) {
  const Matrix g = rng.normal_matrix(n, n);
  Matrix m = scale(matmul(g, transpose(g)), 1.0 / static_cast<double>(n));
  for (std::size_t i = 0; i < n; ++i) m(i, i) += 0.5;
  return cholesky(m);
}

}  // namespace

// ----------------------------------------------------------------------------

ExperimentKind parse_experiment(std::string_view name) {
  name = trim(name);
  if (name == "synth") return ExperimentKind::kSynth;
  if (name == "classify") return ExperimentKind::kClassify;
  if (name == "landscape") return ExperimentKind::kLandscape;
  if (name == "closed-form-check") return ExperimentKind::kClosedFormCheck;
  if (name == "regress") return ExperimentKind::kRegress;
  throw config_error("unknown experiment '" + std::string(name) + "'");
}

std::string_view to_string(ExperimentKind kind) {
  switch (kind) {
    case ExperimentKind::kSynth: return "synth";
    case ExperimentKind::kClassify: return "classify";
    case ExperimentKind::kLandscape: return "landscape";
    case ExperimentKind::kClosedFormCheck: return "closed-form-check";
    case ExperimentKind::kRegress: return "regress";
  }
  return "?";
}

LossKind parse_loss(std::string_view name) {
  name = trim(name);
  if (name == "nll") return LossKind::kNll;
  if (name == "mse") return LossKind::kMse;
  if (name == "pg-identity") return LossKind::kPgIdentity;
  if (name == "pg-heuristic") return LossKind::kPgHeuristic;
  if (name == "pg-implicit") return LossKind::kPgImplicit;
  throw config_error("unknown loss '" + std::string(name) + "'");
}

std::string_view to_string(LossKind kind) {
  switch (kind) {
    case LossKind::kNll: return "nll";
    case LossKind::kMse: return "mse";
    case LossKind::kPgIdentity: return "pg-identity";
    case LossKind::kPgHeuristic: return "pg-heuristic";
    case LossKind::kPgImplicit: return "pg-implicit";
  }
  return "?";
}

void RunConfig::validate() const {
  auto require = [](bool ok, const char* what) {
    if (!ok) throw config_error(what);
  };
  require(out_dim >= 1 && in_dim >= 1, "out_dim and in_dim must be >= 1");
  require(samples >= 10, "samples must be >= 10");
  require(beta > 0.0, "beta must be > 0");
  require(classes >= 2, "classes must be >= 2");
  require(features >= 1, "features must be >= 1");
  require(separation >= 0.0, "separation must be >= 0");
  require(imbalance >= 0.0 && imbalance < 1.0, "imbalance must be in [0, 1)");
  require(state_dim >= 1, "state_dim must be >= 1");
  require(lr > 0.0, "lr must be > 0");
  require(batch_size >= 1, "batch_size must be >= 1");
  require(lambda > 0.0, "lambda must be > 0");
  require(mc_samples >= 1, "mc_samples must be >= 1");
  require(estimator != Estimator::kScoreFunction || mc_samples >= 2, "score estimator needs mc_samples >= 2");
  if (mean_head == MeanHead::kMlp || variance_head == VarianceHead::kMlp) {
    require(!hidden.empty(), "hidden must list at least one layer for MLP heads");
    for (auto h : hidden) require(h >= 1, "hidden widths must be >= 1");
  }
  require(bilevel_outer_lr > 0.0 && bilevel_inner_lr > 0.0, "bilevel learning rates must be > 0");
  require(bilevel_inner_iters >= 1, "bilevel_inner_iters must be >= 1");
  require(cg_damping >= 0.0, "cg_damping must be >= 0");
  require(reward_init > 0.0, "reward_init must be > 0");
  require(u_min > 0.0 && u_max >= u_min, "need 0 < u_min <= u_max");
  require(u_points >= 1, "u_points must be >= 1");
  require(check_instances >= 1, "check_instances must be >= 1");
  require(seeds >= 1, "seeds must be >= 1");
  require(!out_dir.empty(), "out_dir must not be empty");
  if (!csv_path.empty()) {
    require(!csv_features.empty(), "csv_features must name at least one column");
    require(!csv_targets.empty(), "csv_targets must name at least one column");
  }
}

void RunConfig::set(std::string_view key, std::string_view value) {
  key = trim(key);
  for (const auto& k : keys()) {
    if (k.name == key) {
      k.set(*this, value);
      return;
    }
  }
  throw config_error("unknown config key '" + std::string(key) + "'");
}

std::string RunConfig::to_text() const {
  std::string out;
  for (const auto& k : keys()) out += k.name + " = " + k.get(*this) + "\n";
  return out;
}

const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> v;
    for (const auto& k : keys()) v.push_back(k.name);
    return v;
  }();
  return names;
}

RunConfig parse_config(std::string_view text, RunConfig base) {
  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start <= text.size()) {
    const std::size_t nl = text.find('\n', start);
    std::string_view line = text.substr(start, nl == std::string_view::npos ? text.npos : nl - start);
    start = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw config_error("line " + std::to_string(line_no) + ": expected key = value");
    }
    try {
      base.set(line.substr(0, eq), line.substr(eq + 1));
    } catch (const Error& e) {
      throw config_error("line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return base;
}

RunConfig load_config(const std::filesystem::path& path, RunConfig base) {
  std::ifstream in(path);
  if (!in) throw config_error("cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), std::move(base));
}

// ----------------------------------------------------------------------------

void MetricsRecord::check_finite() const {
  for (const auto* f : {&train_nll, &val_nll, &val_mse, &mean_err, &var_err, &accuracy, &auc, &wall_ms}) {
    if (*f && !std::isfinite(**f)) {
      throw Error(ErrorCode::kNonFiniteLoss, "epoch " + std::to_string(epoch) + ": non-finite metric");
    }
  }
}

std::string MetricsRecord::to_json() const {
  ojson j;
  j["epoch"] = epoch;
  auto put = [&](const char* name, const std::optional<double>& v) {
    if (v) j[name] = *v;
  };
  put("train_nll", train_nll);
  put("val_nll", val_nll);
  put("val_mse", val_mse);
  put("mean_err", mean_err);
  put("var_err", var_err);
  put("accuracy", accuracy);
  put("auc", auc);
  put("wall_ms", wall_ms);
  return j.dump();
}

void write_metrics(std::ostream& out, const std::vector<MetricsRecord>& records) {
  for (const auto& r : records) out << r.to_json() << '\n';
}

void write_metrics(const std::filesystem::path& path, const std::vector<MetricsRecord>& records) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::kIoError, "cannot write " + path.string());
  write_metrics(out, records);
}

Moments evaluate_moments(const GaussianPolicy& model, const LinearGaussianTruth& truth, const Matrix& probes) {
  const std::size_t n = truth.output_dim();
  if (model.output_dim() != n || model.input_dim() != truth.input_dim() || probes.cols() != truth.input_dim()) {
    throw Error(ErrorCode::kDimensionMismatch, "evaluate_moments dims");
  }
  if (probes.rows() == 0) throw Error(ErrorCode::kEmptyBatch, "evaluate_moments needs probes");
  const auto pred = model.predict(probes);
  const Matrix target_mean = matmul(probes, transpose(truth.lambda));
  Moments m;
  for (std::size_t i = 0; i < probes.rows(); ++i) {
    double dm = 0.0, dv = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double em = pred.mean(i, j) - target_mean(i, j);
      const double ev = std::exp(pred.logvar(i, j)) - truth.sigma.matrix()(j, j);
      dm += em * em;
      dv += ev * ev;
    }
    m.mean_err += std::sqrt(dm);
    m.var_err += std::sqrt(dv);
  }
  m.mean_err /= static_cast<double>(probes.rows());
  m.var_err /= static_cast<double>(probes.rows());
  return m;
}

double roc_auc(std::span<const double> scores, std::span<const std::size_t> labels) {
  if (scores.size() != labels.size()) throw Error(ErrorCode::kDimensionMismatch, "roc_auc sizes");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // average 1-based ranks across ties
  std::vector<double> rank(scores.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) rank[order[k]] = r;
    i = j + 1;
  }
  double pos = 0.0, neg = 0.0, rank_sum = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == 1) {
      pos += 1.0;
      rank_sum += rank[i];
    } else {
      neg += 1.0;
    }
  }
  if (pos == 0.0 || neg == 0.0) throw Error(ErrorCode::kTooFewSamples, "roc_auc needs both classes");
  return (rank_sum - pos * (pos + 1.0) / 2.0) / (pos * neg);
}

ClassifierScores evaluate_classifier(const CategoricalPolicy& model, const Batch& batch) {
  if (batch.size() == 0) throw Error(ErrorCode::kEmptyBatch, "evaluate_classifier on empty split");
  const Matrix probs = model.probabilities(batch.x);
  const std::size_t k = model.classes();
  std::size_t correct = 0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < k; ++c) {
      if (probs(i, c) > probs(i, best)) best = c;
    }
    if (best == batch.labels[i]) ++correct;
  }
  ClassifierScores s;
  s.accuracy = static_cast<double>(correct) / static_cast<double>(batch.size());
  if (k == 2) {
    const bool both = std::any_of(batch.labels.begin(), batch.labels.end(), [](auto l) { return l == 1; }) &&
                      std::any_of(batch.labels.begin(), batch.labels.end(), [](auto l) { return l == 0; });
    if (both) {
      Vector scores(batch.size());
      for (std::size_t i = 0; i < batch.size(); ++i) scores[i] = probs(i, 1);
      s.auc = roc_auc(scores, batch.labels);
    }
  }
  return s;
}

double gaussian_nll(const GaussianPolicy& model, const Batch& batch) {
  if (batch.size() == 0) throw Error(ErrorCode::kEmptyBatch, "gaussian_nll on empty batch");
  const auto pred = model.predict(batch.x);
  const std::size_t n = model.output_dim();
  double total = 0.0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    total -= gaussian_log_density({&batch.y(i, 0), n}, {&pred.mean(i, 0), n}, {&pred.logvar(i, 0), n});
  }
  return total / static_cast<double>(batch.size());
}

double categorical_nll(const CategoricalPolicy& model, const Batch& batch) {
  if (batch.size() == 0) throw Error(ErrorCode::kEmptyBatch, "categorical_nll on empty batch");
  const Matrix lp = model.log_probabilities(batch.x);
  double total = 0.0;
  for (std::size_t i = 0; i < batch.size(); ++i) total -= lp(i, batch.labels[i]);
  return total / static_cast<double>(batch.size());
}

double gaussian_mse(const GaussianPolicy& model, const Batch& batch) {
  if (batch.size() == 0) throw Error(ErrorCode::kEmptyBatch, "gaussian_mse on empty batch");
  const auto pred = model.predict(batch.x);
  double total = 0.0;
  for (std::size_t k = 0; k < pred.mean.size(); ++k) {
    const double d = pred.mean[k] - batch.y[k];
    total += d * d;
  }
  return total / static_cast<double>(batch.size());
}

// ----------------------------------------------------------------------------

PolicyArch policy_arch(const RunConfig& cfg, std::size_t in_dim, std::size_t out_dim) {
  PolicyArch a{in_dim, out_dim, cfg.mean_head, cfg.variance_head, cfg.hidden};
  if (!a.has_trunk()) a.hidden.clear();
  return a;
}

RewardChoice choose_reward(const RunConfig& cfg, const Dataset& data, Rng& rng) {
  const std::size_t n = data.target_dim();
  switch (cfg.loss) {
    case LossKind::kPgIdentity:
      return {RewardParams::isotropic(n, 1.0), std::nullopt};
    case LossKind::kPgHeuristic:
      return {heuristic_reward(data, cfg.lambda, cfg.heuristic_covariance), std::nullopt};
    case LossKind::kPgImplicit: {
      if (data.task != TaskKind::kRegression) {
        throw config_error("pg-implicit needs continuous targets; the categorical policy has no reparameterised path");
      }
      BilevelConfig b;
      b.outer_iters = cfg.bilevel_outer_iters;
      b.inner_iters = cfg.bilevel_inner_iters;
      b.outer_lr = cfg.bilevel_outer_lr;
      b.inner_lr = cfg.bilevel_inner_lr;
      b.outer_optimizer = b.inner_optimizer = cfg.bilevel_optimizer;
      b.cg_max_iters = cfg.cg_max_iters;
      b.cg_damping = cfg.cg_damping;
      b.lambda = cfg.lambda;
      b.mc_samples = cfg.mc_samples;
      b.estimator = cfg.estimator;
      b.inner_batch = cfg.batch_size;
      b.hyper_batch = cfg.hyper_batch;
      const GaussianPolicy init(policy_arch(cfg, data.input_dim(), n), rng);
      BilevelResult r = solve_bilevel(data, init, RewardParams::isotropic(n, cfg.reward_init), b, rng);
      if (r.failure) throw Error(ErrorCode::kNonFiniteLoss, "reward search: " + *r.failure);
      return {std::move(r.reward), std::move(r.trace)};
    }
    default:
      throw config_error("loss '" + std::string(to_string(cfg.loss)) + "' has no reward");
  }
}

TrainResult train(const RunConfig& cfg, const Dataset& data, Rng& rng, const LinearGaussianTruth* truth) {
  cfg.validate();
  data.validate();
  if (data.train.empty()) throw Error(ErrorCode::kTooFewSamples, "train split is empty");
  std::optional<RewardChoice> choice;
  if (is_pg(cfg.loss)) choice = choose_reward(cfg, data, rng);
  const RewardParams reward = choice ? choice->reward : RewardParams::isotropic(data.target_dim(), 1.0);

  if (data.task == TaskKind::kClassification) {
    CategoricalPolicy policy(data.input_dim(), data.classes, rng);
    FitResult fit = fit_categorical(cfg, data, policy, reward, rng);
    TrainResult out{policy, std::move(fit.metrics), std::nullopt, std::nullopt, fit.failure, {}};
    out.instability.non_finite = fit.failure.has_value();
    out.instability.flagged = out.instability.non_finite;
    if (out.instability.flagged) out.instability.reason = "non-finite loss";
    if (choice) out.reward = reward;
    return out;
  }

  if (truth && (truth->output_dim() != data.target_dim() || truth->input_dim() != data.input_dim())) {
    throw Error(ErrorCode::kDimensionMismatch, "truth model does not match the data");
  }
  GaussianPolicy policy(policy_arch(cfg, data.input_dim(), data.target_dim()), rng);
  FitResult fit = fit_gaussian(cfg, data, policy, reward, rng, truth);
  const Instability inst = assess_gaussian(policy, data, fit);
  TrainResult out{policy, std::move(fit.metrics), std::nullopt, std::nullopt, fit.failure, inst};
  if (choice) {
    out.reward = reward;
    out.bilevel_trace = std::move(choice->trace);
  }
  return out;
}

std::vector<double> log_grid(double lo, double hi, std::size_t count) {
  if (!(lo > 0.0) || hi < lo || count == 0) throw config_error("log_grid needs 0 < lo <= hi and count >= 1");
  if (count == 1) return {lo};
  std::vector<double> g(count);
  const double a = std::log(lo), b = std::log(hi);
  for (std::size_t i = 0; i < count; ++i) {
    g[i] = std::exp(a + (b - a) * static_cast<double>(i) / static_cast<double>(count - 1));
  }
  g.front() = lo;
  g.back() = hi;
  return g;
}

std::vector<LandscapePoint> landscape_sweep(const Dataset& data, std::span<const double> u_grid,
                                            const RunConfig& cfg, Rng& rng) {
  cfg.validate();
  if (data.task != TaskKind::kRegression) throw config_error("landscape needs regression data");
  if (u_grid.empty()) throw config_error("landscape grid is empty");
  for (std::size_t i = 0; i < u_grid.size(); ++i) {
    if (!(u_grid[i] > 0.0) || (i > 0 && u_grid[i] <= u_grid[i - 1])) {
      throw config_error("landscape grid must be positive and strictly increasing");
    }
  }
  const std::size_t n = data.target_dim();
  const GaussianPolicy init(policy_arch(cfg, data.input_dim(), n), rng);
  // every point sees the same minibatch order and noise
  const Rng stream = rng.split();
  RunConfig point_cfg = cfg;
  point_cfg.loss = LossKind::kPgIdentity;

  std::vector<LandscapePoint> out;
  for (double u : u_grid) {
    GaussianPolicy policy = init;
    Rng r = stream;
    const FitResult fit = fit_gaussian(point_cfg, data, policy, RewardParams::isotropic(n, u), r, nullptr);
    LandscapePoint p{u, std::nullopt};
    if (!fit.failure && !fit.metrics.empty() && fit.metrics.back().epoch == cfg.epochs) {
      p.outer_nll = fit.metrics.back().val_nll;
    }
    out.push_back(p);
  }
  return out;
}

void write_landscape_csv(std::ostream& out, const std::vector<LandscapePoint>& points) {
  out << "u,outer_nll\n";
  for (const auto& p : points) out << fmt_double(p.u) << ',' << (p.outer_nll ? fmt_double(*p.outer_nll) : "nan") << '\n';
}

SummaryStat summarize(std::span<const double> values) {
  SummaryStat s;
  double sum = 0.0;
  for (double v : values) {
    if (!std::isfinite(v)) continue;
    sum += v;
    ++s.count;
  }
  if (s.count == 0) {
    s.mean = std::numeric_limits<double>::quiet_NaN();
    return s;
  }
  s.mean = sum / static_cast<double>(s.count);
  if (s.count > 1) {
    double sq = 0.0;
    for (double v : values) {
      if (std::isfinite(v)) sq += (v - s.mean) * (v - s.mean);
    }
    s.stderr_ = std::sqrt(sq / static_cast<double>(s.count - 1)) / std::sqrt(static_cast<double>(s.count));
  }
  return s;
}

std::vector<ClosedFormInstance> closed_form_check(std::size_t count, std::uint64_t seed) {
  static constexpr std::size_t kDims[] = {1, 2, 4};
  static constexpr double kLambdas[] = {0.5, 1.0, 2.0};
  Rng rng(seed);
  std::vector<ClosedFormInstance> out;
  for (std::size_t i = 0; i < count; ++i) {
    ClosedFormInstance c;
    c.n = kDims[i % 3];
    c.lambda = kLambdas[(i / 3) % 3];
    const std::size_t m = c.n + 1;
    const SpdMatrix sigma = random_spd(c.n, rng);
    const SpdMatrix u = random_spd(c.n, rng);
    const SpdMatrix sigma_x = random_spd(m, rng);
    Matrix lam(c.n, m);
    for (double& v : lam.data()) v = rng.uniform(-1.0, 1.0);
    const LinearGaussianTruth truth{lam, sigma};

    const InnerAscentResult inner = maximize_closed_form_J(truth, u, c.lambda, sigma_x);
    const InnerSolution want = inner_solution(u, truth, c.lambda);
    c.a_err = max_abs_diff(inner.a, want.a_star);
    c.b_err = max_abs_diff(inner.b.matrix(), want.b_star.matrix());

    const OuterDescentResult outer = minimize_outer_nll(sigma, c.lambda);
    const Matrix ustar = optimal_reward(sigma, c.lambda).matrix();
    c.u_rel_err = frobenius_norm(sub(outer.u.matrix(), ustar)) / frobenius_norm(ustar);
    c.converged = inner.converged && outer.converged;
    out.push_back(c);
  }
  return out;
}

// ----------------------------------------------------------------------------

int exit_code_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::kConfigError:
    case ErrorCode::kUnsupportedPrimitive:
      return 2;
    case ErrorCode::kMissingColumn:
    case ErrorCode::kNonNumericCell:
    case ErrorCode::kEmptyFile:
    case ErrorCode::kIoError:
    case ErrorCode::kFormatError:
    case ErrorCode::kTooFewSamples:
    case ErrorCode::kEmptyBatch:
    case ErrorCode::kDimensionMismatch:
      return 3;
    case ErrorCode::kNotPositiveDefinite:
    case ErrorCode::kNotSquare:
    case ErrorCode::kNotSymmetric:
    case ErrorCode::kNonFiniteLoss:
    case ErrorCode::kBreakdownNonFinite:
      return 4;
  }
  return 4;
}

namespace {

namespace fs = std::filesystem;

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::kIoError, "cannot write " + path.string());
  out << text;
}

ojson stat_json(const SummaryStat& s) {
  ojson j;
  j["mean"] = s.count ? ojson(s.mean) : ojson(nullptr);
  j["stderr"] = s.stderr_;
  j["count"] = s.count;
  return j;
}

Dataset load_user_csv(const RunConfig& cfg, TaskKind task, std::uint64_t seed) {
  CsvSchema schema{cfg.csv_features, cfg.csv_targets, task, seed, true};
  return load_csv(cfg.csv_path, schema);
}

// Final-metric summaries keyed by name; values are per seed (NaN when absent).
struct SeedTable {
  std::vector<std::uint64_t> seeds;
  std::map<std::string, std::vector<double>> columns;

  void add(std::size_t row, const std::string& name, std::optional<double> v) {
    auto& col = columns[name];
    col.resize(seeds.size(), std::numeric_limits<double>::quiet_NaN());
    if (v) col[row] = *v;
  }
};

ExperimentOutcome run_training(const RunConfig& cfg, std::ostream& log) {
  const fs::path out_dir(cfg.out_dir);
  SeedTable table;
  ojson per_seed = ojson::array();
  bool any_failure = false;
  for (std::size_t s = 0; s < cfg.seeds; ++s) {
    const std::uint64_t seed = cfg.seed + s;
    table.seeds.push_back(seed);
    Dataset data;
    std::optional<LinearGaussianTruth> truth;
    switch (cfg.experiment) {
      case ExperimentKind::kSynth: {
        SyntheticData syn = generate_synthetic(cfg.out_dim, cfg.in_dim, cfg.samples, cfg.beta, seed);
        data = std::move(syn.data);
        truth = std::move(syn.truth);
        break;
      }
      case ExperimentKind::kClassify:
        data = cfg.csv_path.empty() ? generate_classification(cfg.samples, cfg.features, cfg.classes, cfg.separation,
                                                              cfg.imbalance, seed)
                                    : load_user_csv(cfg, TaskKind::kClassification, seed);
        break;
      default:
        data = cfg.csv_path.empty() ? generate_dynamics(cfg.samples, cfg.state_dim, cfg.action_dim, seed)
                                    : load_user_csv(cfg, TaskKind::kRegression, seed);
    }
    Rng rng(seed);
    TrainResult r = train(cfg, data, rng, truth ? &*truth : nullptr);
    const std::string tag = "seed" + std::to_string(seed);
    write_metrics(out_dir / ("metrics_" + tag + ".jsonl"), r.metrics);
    if (all_finite(std::visit([](const auto& p) { return p.params().values(); }, r.model))) {
      save_checkpoint(out_dir / ("model_" + tag + ".ckpt"), r.model);
    }
    if (r.bilevel_trace) r.bilevel_trace->write_jsonl(out_dir / ("bilevel_" + tag + ".jsonl"));

    const std::size_t row = s;
    const MetricsRecord& last = r.metrics.back();
    table.add(row, "final_val_nll", last.val_nll);
    table.add(row, "final_val_mse", last.val_mse);
    table.add(row, "final_mean_err", last.mean_err);
    table.add(row, "final_var_err", last.var_err);

    ojson j;
    j["seed"] = seed;
    j["epochs_completed"] = last.epoch;
    if (r.reward) j["reward_raw"] = r.reward->raw();
    const Batch test = data.split(Split::kTest);
    if (test.size() > 0) {
      if (const auto* cat = std::get_if<CategoricalPolicy>(&r.model)) {
        const ClassifierScores sc = evaluate_classifier(*cat, test);
        table.add(row, "test_accuracy", sc.accuracy);
        table.add(row, "test_auc", sc.auc);
        table.add(row, "test_nll", categorical_nll(*cat, test));
        j["test_accuracy"] = sc.accuracy;
        if (sc.auc) j["test_auc"] = *sc.auc;
      } else if (const auto* g = std::get_if<GaussianPolicy>(&r.model); g && all_finite(g->params().values())) {
        const double nll = gaussian_nll(*g, test);
        const double mse = gaussian_mse(*g, test);
        if (std::isfinite(nll)) table.add(row, "test_nll", nll);
        table.add(row, "test_mse", mse);
      }
    }
    j["unstable"] = r.instability.flagged;
    if (r.instability.flagged) j["instability"] = r.instability.reason;
    j["clamp_fraction"] = r.instability.clamp_fraction;
    j["nll_rise_per_dim"] = r.instability.nll_rise;
    if (r.failure) {
      j["failure"] = *r.failure;
      any_failure = true;
    }
    per_seed.push_back(j);
    log << to_string(cfg.experiment) << ' ' << to_string(cfg.loss) << " seed " << seed << ": val_nll "
        << (last.val_nll ? fmt_double(*last.val_nll) : "-") << (r.instability.flagged ? " [unstable]" : "")
        << (r.failure ? " [failed]" : "") << '\n';
  }

  ojson summary;
  summary["experiment"] = to_string(cfg.experiment);
  summary["loss"] = to_string(cfg.loss);
  summary["seeds"] = table.seeds;
  ojson stats;
  for (auto& [name, col] : table.columns) {
    col.resize(table.seeds.size(), std::numeric_limits<double>::quiet_NaN());
    const SummaryStat st = summarize(col);
    if (st.count > 0) stats[name] = stat_json(st);  // e.g. auc on multiclass
  }
  summary["summary"] = stats;
  summary["runs"] = per_seed;
  write_text(out_dir / "summary.json", summary.dump(2) + "\n");
  if (any_failure) return {4, "training hit a non-finite loss (partial metrics written)"};
  return {0, "ok"};
}

ExperimentOutcome run_landscape(const RunConfig& cfg, std::ostream& log) {
  const fs::path out_dir(cfg.out_dir);
  const SyntheticData syn = generate_synthetic(cfg.out_dim, cfg.in_dim, cfg.samples, cfg.beta, cfg.seed);
  Rng rng(cfg.seed);
  const std::vector<double> grid = log_grid(cfg.u_min, cfg.u_max, cfg.u_points);
  const std::vector<LandscapePoint> points = landscape_sweep(syn.data, grid, cfg, rng);
  {
    std::ofstream out(out_dir / "landscape.csv");
    if (!out) throw Error(ErrorCode::kIoError, "cannot write landscape.csv");
    write_landscape_csv(out, points);
  }
  const double ustar = isotropic_reward(syn.truth.sigma, cfg.lambda);
  std::optional<double> best_u;
  double best = std::numeric_limits<double>::infinity();
  std::size_t missing = 0;
  for (const auto& p : points) {
    if (!p.outer_nll) {
      ++missing;
      continue;
    }
    if (*p.outer_nll < best) {
      best = *p.outer_nll;
      best_u = p.u;
    }
  }
  ojson summary;
  summary["experiment"] = "landscape";
  summary["seed"] = cfg.seed;
  summary["u_star"] = ustar;
  summary["argmin_u"] = best_u ? ojson(*best_u) : ojson(nullptr);
  summary["min_outer_nll"] = best_u ? ojson(best) : ojson(nullptr);
  summary["missing_points"] = missing;
  write_text(out_dir / "summary.json", summary.dump(2) + "\n");
  log << "landscape: argmin u " << (best_u ? fmt_double(*best_u) : "-") << ", u* " << fmt_double(ustar) << '\n';
  return {0, "ok"};
}

ExperimentOutcome run_closed_form(const RunConfig& cfg, std::ostream& log) {
  const fs::path out_dir(cfg.out_dir);
  const auto rows = closed_form_check(cfg.check_instances, cfg.seed);
  std::ofstream out(out_dir / "closed_form_check.jsonl");
  if (!out) throw Error(ErrorCode::kIoError, "cannot write closed_form_check.jsonl");
  std::size_t bad = 0;
  for (const auto& c : rows) {
    const bool ok = c.a_err <= 1e-4 && c.b_err <= 1e-3 && c.u_rel_err <= 0.02;
    if (!ok) ++bad;
    ojson j;
    j["n"] = c.n;
    j["lambda"] = c.lambda;
    j["a_err"] = c.a_err;
    j["b_err"] = c.b_err;
    j["u_rel_err"] = c.u_rel_err;
    j["converged"] = c.converged;
    j["ok"] = ok;
    out << j.dump() << '\n';
  }
  log << "closed-form-check: " << rows.size() - bad << "/" << rows.size() << " instances within tolerance\n";
  if (bad) return {4, std::to_string(bad) + " instance(s) outside tolerance"};
  return {0, "ok"};
}

}  // namespace

ExperimentOutcome run_experiment(const RunConfig& cfg, std::ostream& log) {
  cfg.validate();
  std::error_code ec;
  fs::create_directories(cfg.out_dir, ec);
  if (ec) throw Error(ErrorCode::kIoError, "cannot create " + cfg.out_dir + ": " + ec.message());
  write_text(fs::path(cfg.out_dir) / "config.txt", cfg.to_text());
  switch (cfg.experiment) {
    case ExperimentKind::kLandscape:
      return run_landscape(cfg, log);
    case ExperimentKind::kClosedFormCheck:
      return run_closed_form(cfg, log);
    default:
      return run_training(cfg, log);
  }
}

}  // namespace nllpo
