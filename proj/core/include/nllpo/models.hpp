#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "nllpo/autodiff.hpp"
#include "nllpo/matrix.hpp"
#include "nllpo/rng.hpp"
#include "nllpo/spd.hpp"
#include "nllpo/tape.hpp"

namespace nllpo {

inline constexpr double kLogVarMin = -10.0;
inline constexpr double kLogVarMax = 4.0;

/// Data-generating model Y | X ~ N(ΛX, Σ).
struct LinearGaussianTruth {
  Matrix lambda;  ///< n×m
  SpdMatrix sigma;

  std::size_t output_dim() const { return lambda.rows(); }
  std::size_t input_dim() const { return lambda.cols(); }
};

Vector truth_sample(const LinearGaussianTruth& truth, std::span<const double> x, Rng& rng);

enum class MeanHead { kLinear, kMlp };
enum class VarianceHead { kConstant, kMlp };

struct PolicyArch {
  std::size_t input_dim = 0;
  std::size_t output_dim = 0;
  MeanHead mean = MeanHead::kMlp;
  VarianceHead variance = VarianceHead::kMlp;
  std::vector<std::size_t> hidden{64, 64};

  bool has_trunk() const { return mean == MeanHead::kMlp || variance == VarianceHead::kMlp; }
  friend bool operator==(const PolicyArch&, const PolicyArch&) = default;
};

/// Batch outputs of a Gaussian policy on a tape: both B×n.
struct GaussianHeads {
  Var mean;
  Var logvar;
};

/// Conditional Gaussian N(μ_θ(x), diag(exp(logvar_θ(x)))) with a linear or
/// MLP mean and a constant or MLP log-variance clamped to [-10, 4].
///
/// Parameter layout (row-major, each a named segment):
///   trunk_w{i} (fan_in×fan_out), trunk_b{i}     when any head is an MLP
///   mean_weights (n×m) for the linear head, or mean_weights (h×n) + mean_bias
///   log_var (n) for the constant head, or log_var_weights (h×n) + log_var_bias
class GaussianPolicy {
 public:
  GaussianPolicy(PolicyArch arch, Rng& rng);
  /// Rebuilds a policy from stored parameters; the segment map must match the layout.
  GaussianPolicy(PolicyArch arch, ParamVector params);
  /// Linear mean A (n×m) and constant log-variance.
  static GaussianPolicy linear(const Matrix& a, std::span<const double> logvar);

  const PolicyArch& arch() const noexcept { return arch_; }
  ParamVector& params() noexcept { return params_; }
  const ParamVector& params() const noexcept { return params_; }
  std::size_t input_dim() const noexcept { return arch_.input_dim; }
  std::size_t output_dim() const noexcept { return arch_.output_dim; }

  template <class T>
  GaussianHeads forward(Tape<T>& tape, Var params, const Matrix& x) const;

  struct Prediction {
    Matrix mean;
    Matrix logvar;
  };
  Prediction predict(const Matrix& x) const;

  /// Clips constant log-variance parameters into the clamp range.
  void project();

  friend bool operator==(const GaussianPolicy&, const GaussianPolicy&) = default;

 private:
  GaussianPolicy() = default;
  void layout();

  PolicyArch arch_;
  ParamVector params_;
};

/// Logits = W x + b followed by a softmax over K classes.
class CategoricalPolicy {
 public:
  CategoricalPolicy(std::size_t features, std::size_t classes, Rng& rng);
  CategoricalPolicy(std::size_t features, std::size_t classes, ParamVector params);

  std::size_t features() const noexcept { return features_; }
  std::size_t classes() const noexcept { return classes_; }
  ParamVector& params() noexcept { return params_; }
  const ParamVector& params() const noexcept { return params_; }

  /// B×K log-probabilities.
  template <class T>
  Var log_probs(Tape<T>& tape, Var params, const Matrix& x) const;
  Matrix probabilities(const Matrix& x) const;
  Matrix log_probabilities(const Matrix& x) const;

  friend bool operator==(const CategoricalPolicy&, const CategoricalPolicy&) = default;

 private:
  void layout();

  std::size_t features_ = 0;
  std::size_t classes_ = 0;
  ParamVector params_;
};

struct Sample {
  Vector value;             ///< continuous draw (empty for categorical)
  std::size_t label = 0;    ///< class draw (categorical only)
  double log_prob = 0.0;
  Vector noise;             ///< standard-normal draw used for reparameterization
};

Matrix row_matrix(std::span<const double> x);

Sample policy_sample(const GaussianPolicy& p, std::span<const double> x, Rng& rng);
Sample policy_sample_with_noise(const GaussianPolicy& p, std::span<const double> x,
                                std::span<const double> noise);
double log_prob(const GaussianPolicy& p, std::span<const double> x, std::span<const double> y);
double entropy(const GaussianPolicy& p, std::span<const double> x);

Sample categorical_sample(const CategoricalPolicy& p, std::span<const double> x, Rng& rng);
double categorical_entropy(const CategoricalPolicy& p, std::span<const double> x);

/// Diagonal Gaussian log-density in nats.
double gaussian_log_density(std::span<const double> y, std::span<const double> mean,
                            std::span<const double> logvar);

// Checkpoints: 8-byte magic "NLLPOCK1", little-endian u64 header length, a
// UTF-8 JSON header (architecture + segment map), then the flat parameters as
// little-endian float64.
using AnyPolicy = std::variant<GaussianPolicy, CategoricalPolicy>;
void save_checkpoint(const std::filesystem::path& path, const AnyPolicy& policy);
AnyPolicy load_checkpoint(const std::filesystem::path& path);

// ---------------------------------------------------------------------------

template <class T>
GaussianHeads GaussianPolicy::forward(Tape<T>& tape, Var params, const Matrix& x) const {
  if (x.cols() != arch_.input_dim) throw Error(ErrorCode::kDimensionMismatch, "policy input dim");
  const std::size_t batch = x.rows();
  const std::size_t n = arch_.output_dim;
  auto seg = [&](const char* name, std::size_t rows, std::size_t cols) {
    return tape.slice(params, params_.find(name).offset, rows, cols);
  };
  const Var input = tape.constant(x);

  Var hidden = input;
  std::size_t width = arch_.input_dim;
  if (arch_.has_trunk()) {
    for (std::size_t layer = 0; layer < arch_.hidden.size(); ++layer) {
      const std::string idx = std::to_string(layer);
      const std::size_t out = arch_.hidden[layer];
      const Var w = seg(("trunk_w" + idx).c_str(), width, out);
      const Var b = seg(("trunk_b" + idx).c_str(), 1, out);
      hidden = tape.relu(tape.add_row(tape.matmul(hidden, w), b));
      width = out;
    }
  }

  Var mean;
  if (arch_.mean == MeanHead::kLinear) {
    const Var a = seg("mean_weights", n, arch_.input_dim);
    mean = tape.matmul(input, tape.transpose(a));
  } else {
    mean = tape.add_row(tape.matmul(hidden, seg("mean_weights", width, n)), seg("mean_bias", 1, n));
  }

  Var logvar;
  if (arch_.variance == VarianceHead::kConstant) {
    logvar = tape.broadcast_rows(seg("log_var", 1, n), batch);
  } else {
    logvar = tape.add_row(tape.matmul(hidden, seg("log_var_weights", width, n)),
                          seg("log_var_bias", 1, n));
  }
  logvar = tape.clamp(logvar, kLogVarMin, kLogVarMax);
  return {mean, logvar};
}

template <class T>
Var CategoricalPolicy::log_probs(Tape<T>& tape, Var params, const Matrix& x) const {
  if (x.cols() != features_) throw Error(ErrorCode::kDimensionMismatch, "classifier input dim");
  const Var w = tape.slice(params, params_.find("logits_weights").offset, classes_, features_);
  const Var b = tape.slice(params, params_.find("logits_bias").offset, 1, classes_);
  const Var logits = tape.add_row(tape.matmul(tape.constant(x), tape.transpose(w)), b);
  return tape.log_softmax_rows(logits);
}

}  // namespace nllpo
