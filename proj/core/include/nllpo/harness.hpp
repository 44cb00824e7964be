#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "nllpo/bilevel.hpp"
#include "nllpo/dataset.hpp"
#include "nllpo/models.hpp"
#include "nllpo/objectives.hpp"
#include "nllpo/optim.hpp"
#include "nllpo/rng.hpp"

namespace nllpo {

enum class ExperimentKind { kSynth, kClassify, kLandscape, kClosedFormCheck, kRegress };
enum class LossKind { kNll, kMse, kPgIdentity, kPgHeuristic, kPgImplicit };

ExperimentKind parse_experiment(std::string_view name);
std::string_view to_string(ExperimentKind kind);
LossKind parse_loss(std::string_view name);
std::string_view to_string(LossKind kind);

/// Everything one run needs. Text form is flat `key = value` lines; see
/// `config_keys()` for the accepted keys.
struct RunConfig {
  ExperimentKind experiment = ExperimentKind::kSynth;
  LossKind loss = LossKind::kNll;

  // synthetic regression
  std::size_t out_dim = 2;
  std::size_t in_dim = 2;
  std::size_t samples = 2000;
  double beta = 0.5;

  // classification generator
  std::size_t classes = 2;
  std::size_t features = 8;
  double separation = 1.0;
  double imbalance = 0.0;

  // dynamics regression
  std::size_t state_dim = 3;
  std::size_t action_dim = 1;

  // user CSV (classify / regress); empty path means use the generator
  std::string csv_path;
  std::vector<std::string> csv_features;
  std::vector<std::string> csv_targets;

  // model
  MeanHead mean_head = MeanHead::kMlp;
  VarianceHead variance_head = VarianceHead::kMlp;
  std::vector<std::size_t> hidden{64, 64};

  // optimisation
  OptimizerKind optimizer = OptimizerKind::kAdam;
  double lr = 1e-3;
  std::size_t epochs = 400;
  std::size_t batch_size = 128;
  double lambda = 1.0;
  std::size_t mc_samples = 8;
  Estimator estimator = Estimator::kReparameterized;
  CovarianceMode heuristic_covariance = CovarianceMode::kRaw;

  // pg-implicit (reward search before the final retrain)
  std::size_t bilevel_outer_iters = 30;
  std::size_t bilevel_inner_iters = 50;
  double bilevel_outer_lr = 1e-2;
  double bilevel_inner_lr = 1e-2;
  OptimizerKind bilevel_optimizer = OptimizerKind::kAdam;
  std::size_t hyper_batch = 256;
  std::size_t cg_max_iters = 20;
  double cg_damping = 0.0;
  double reward_init = 1.0;

  // landscape sweep over u: u_min..u_max, log-spaced
  double u_min = 0.25;
  double u_max = 8.0;
  std::size_t u_points = 11;

  // closed-form check
  std::size_t check_instances = 20;

  std::uint64_t seed = 0;
  std::size_t seeds = 5;
  std::string out_dir = "out";
  bool record_timing = false;

  void validate() const;
  /// Applies one `key=value` setting; unknown keys and bad values throw ConfigError.
  void set(std::string_view key, std::string_view value);
  /// Canonical text form, one `key = value` per line, readable by parse_config.
  std::string to_text() const;
};

/// All keys accepted by RunConfig::set, in to_text order.
const std::vector<std::string>& config_keys();

/// Parses flat key=value text on top of `base`. '#' starts a comment.
RunConfig parse_config(std::string_view text, RunConfig base = {});
RunConfig load_config(const std::filesystem::path& path, RunConfig base = {});

/// One line of the metrics stream. Fields that make no sense for the run are empty.
struct MetricsRecord {
  std::size_t epoch = 0;
  std::optional<double> train_nll;
  std::optional<double> val_nll;
  std::optional<double> val_mse;
  std::optional<double> mean_err;
  std::optional<double> var_err;
  std::optional<double> accuracy;
  std::optional<double> auc;
  std::optional<double> wall_ms;

  /// Throws NonFiniteLoss if a present field is not finite.
  void check_finite() const;
  std::string to_json() const;
};

void write_metrics(std::ostream& out, const std::vector<MetricsRecord>& records);
void write_metrics(const std::filesystem::path& path, const std::vector<MetricsRecord>& records);

struct Moments {
  double mean_err = 0.0;  ///< average ‖μ(x) − Λx‖
  double var_err = 0.0;   ///< average ‖σ²(x) − diag Σ‖
};
Moments evaluate_moments(const GaussianPolicy& model, const LinearGaussianTruth& truth, const Matrix& probes);

/// Rank AUC with ties averaged; labels are 0/1. Needs both classes present.
double roc_auc(std::span<const double> scores, std::span<const std::size_t> labels);

struct ClassifierScores {
  double accuracy = 0.0;
  std::optional<double> auc;  ///< binary tasks only
};
ClassifierScores evaluate_classifier(const CategoricalPolicy& model, const Batch& batch);

/// Mean NLL (nats per example) of a Gaussian policy on a batch.
double gaussian_nll(const GaussianPolicy& model, const Batch& batch);
double categorical_nll(const CategoricalPolicy& model, const Batch& batch);
/// Mean squared error of the mean head, averaged over rows (summed over outputs).
double gaussian_mse(const GaussianPolicy& model, const Batch& batch);

/// Why a run was flagged unstable, if it was.
struct Instability {
  bool non_finite = false;
  double clamp_fraction = 0.0;  ///< share of val log-variances at a clamp bound, last epoch
  double nll_rise = 0.0;        ///< final − best val NLL, nats per output dimension
  bool flagged = false;
  std::string reason;
};

struct TrainResult {
  AnyPolicy model;
  std::vector<MetricsRecord> metrics;
  std::optional<RewardParams> reward;  ///< reward the final model was trained under (pg losses)
  std::optional<BilevelTrace> bilevel_trace;
  std::optional<std::string> failure;  ///< non-finite abort; metrics so far are kept
  Instability instability;
};

PolicyArch policy_arch(const RunConfig& cfg, std::size_t in_dim, std::size_t out_dim);

/// Trains the configured loss on `data`. `truth` enables the moment metrics.
TrainResult train(const RunConfig& cfg, const Dataset& data, Rng& rng,
                  const LinearGaussianTruth* truth = nullptr);

/// Reward a pg loss trains under: identity, heuristic, or the result of a
/// bilevel search (which also returns its trace).
struct RewardChoice {
  RewardParams reward;
  std::optional<BilevelTrace> trace;
};
RewardChoice choose_reward(const RunConfig& cfg, const Dataset& data, Rng& rng);

struct LandscapePoint {
  double u = 0.0;
  std::optional<double> outer_nll;  ///< empty when training hit a non-finite loss
};

/// For each u, trains a fresh policy (same init) with the pg loss at U = uI
/// for cfg.epochs and records the val NLL.
std::vector<LandscapePoint> landscape_sweep(const Dataset& data, std::span<const double> u_grid,
                                            const RunConfig& cfg, Rng& rng);
/// Header `u,outer_nll`; missing values are written as `nan`.
void write_landscape_csv(std::ostream& out, const std::vector<LandscapePoint>& points);
std::vector<double> log_grid(double lo, double hi, std::size_t count);

struct SummaryStat {
  double mean = 0.0;
  double stderr_ = 0.0;
  std::size_t count = 0;
};
/// Mean and standard error (sample sd / √k) of the finite values.
SummaryStat summarize(std::span<const double> values);

/// One linear-Gaussian instance: random SPD Σ, U, Σ_X and Λ. The inner
/// maximiser of J is compared with (Λ, λU⁻¹/2); the outer minimiser over U
/// with (λ/2)Σ⁻¹.
struct ClosedFormInstance {
  std::size_t n = 0;
  double lambda = 0.0;
  double a_err = 0.0;      ///< max |A − Λ|
  double b_err = 0.0;      ///< max |B − λU⁻¹/2|
  double u_rel_err = 0.0;  ///< ‖U − U*‖_F / ‖U*‖_F
  bool converged = false;
};
/// n cycles through {1, 2, 4} and λ through {0.5, 1, 2}.
std::vector<ClosedFormInstance> closed_form_check(std::size_t count, std::uint64_t seed);

/// Result of one CLI-level experiment; `status` is the process exit code.
struct ExperimentOutcome {
  int status = 0;
  std::string message;
};

/// Runs `cfg.experiment` for `cfg.seeds` seeds (seed, seed+1, ...) and writes
/// all artefacts under cfg.out_dir.
ExperimentOutcome run_experiment(const RunConfig& cfg, std::ostream& log);

/// Exit status for a library error: 2 config, 3 data, 4 numerical.
int exit_code_for(ErrorCode code);

}  // namespace nllpo
