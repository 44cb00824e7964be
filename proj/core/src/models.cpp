#include "nllpo/models.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <numbers>

#include "json.hpp"

namespace nllpo {

namespace {

constexpr double kLog2Pi = 1.8378770664093453;  // log(2π)

void fill_uniform(std::span<double> v, double bound, Rng& rng) {
  for (double& x : v) x = rng.uniform(-bound, bound);
}

}  // namespace

Vector truth_sample(const LinearGaussianTruth& truth, std::span<const double> x, Rng& rng) {
  Vector y = matvec(truth.lambda, x);
  const Matrix& l = truth.sigma.factor();
  Vector z(y.size());
  for (double& v : z) v = rng.normal();
  for (std::size_t i = 0; i < y.size(); ++i) {
    for (std::size_t k = 0; k <= i; ++k) y[i] += l(i, k) * z[k];
  }
  return y;
}

Matrix row_matrix(std::span<const double> x) {
  return Matrix(1, x.size(), std::vector<double>(x.begin(), x.end()));
}

double gaussian_log_density(std::span<const double> y, std::span<const double> mean,
                            std::span<const double> logvar) {
  if (y.size() != mean.size() || y.size() != logvar.size()) {
    throw Error(ErrorCode::kDimensionMismatch, "gaussian_log_density");
  }
  double s = 0.0;
  for (std::size_t j = 0; j < y.size(); ++j) {
    const double d = y[j] - mean[j];
    s += d * d * std::exp(-logvar[j]) + logvar[j] + kLog2Pi;
  }
  return -0.5 * s;
}

// ---------------------------------------------------------------------------
// GaussianPolicy

void GaussianPolicy::layout() {
  const std::size_t m = arch_.input_dim;
  const std::size_t n = arch_.output_dim;
  if (m == 0 || n == 0) throw Error(ErrorCode::kConfigError, "policy dims must be positive");
  std::size_t width = m;
  if (arch_.has_trunk()) {
    if (arch_.hidden.empty()) throw Error(ErrorCode::kConfigError, "MLP head needs hidden layers");
    for (std::size_t layer = 0; layer < arch_.hidden.size(); ++layer) {
      const std::string idx = std::to_string(layer);
      params_.add_segment("trunk_w" + idx, width * arch_.hidden[layer]);
      params_.add_segment("trunk_b" + idx, arch_.hidden[layer]);
      width = arch_.hidden[layer];
    }
  }
  if (arch_.mean == MeanHead::kLinear) {
    params_.add_segment("mean_weights", n * m);
  } else {
    params_.add_segment("mean_weights", width * n);
    params_.add_segment("mean_bias", n);
  }
  if (arch_.variance == VarianceHead::kConstant) {
    params_.add_segment("log_var", n);
  } else {
    params_.add_segment("log_var_weights", width * n);
    params_.add_segment("log_var_bias", n);
  }
}

GaussianPolicy::GaussianPolicy(PolicyArch arch, Rng& rng) : arch_(std::move(arch)) {
  layout();
  const std::size_t m = arch_.input_dim;
  std::size_t width = m;
  if (arch_.has_trunk()) {
    for (std::size_t layer = 0; layer < arch_.hidden.size(); ++layer) {
      const std::string idx = std::to_string(layer);
      const double bound = 1.0 / std::sqrt(static_cast<double>(width));
      fill_uniform(params_.segment("trunk_w" + idx), bound, rng);
      fill_uniform(params_.segment("trunk_b" + idx), bound, rng);
      width = arch_.hidden[layer];
    }
  }
  if (arch_.mean == MeanHead::kLinear) {
    fill_uniform(params_.segment("mean_weights"), 1.0 / std::sqrt(static_cast<double>(m)), rng);
  } else {
    const double bound = 1.0 / std::sqrt(static_cast<double>(width));
    fill_uniform(params_.segment("mean_weights"), bound, rng);
    fill_uniform(params_.segment("mean_bias"), bound, rng);
  }
  if (arch_.variance == VarianceHead::kMlp) {
    fill_uniform(params_.segment("log_var_weights"), 1.0 / std::sqrt(static_cast<double>(width)), rng);
    // log_var_bias stays 0 so the initial scale is close to 1.
  }
}

GaussianPolicy::GaussianPolicy(PolicyArch arch, ParamVector params) : arch_(std::move(arch)) {
  layout();
  if (params.segments().size() != params_.segments().size()) {
    throw Error(ErrorCode::kFormatError, "segment map does not match architecture");
  }
  for (std::size_t i = 0; i < params.segments().size(); ++i) {
    const Segment& a = params.segments()[i];
    const Segment& b = params_.segments()[i];
    if (a.name != b.name || a.offset != b.offset || a.size != b.size) {
      throw Error(ErrorCode::kFormatError, "segment '" + a.name + "' does not match architecture");
    }
  }
  params_ = std::move(params);
}

GaussianPolicy GaussianPolicy::linear(const Matrix& a, std::span<const double> logvar) {
  if (logvar.size() != a.rows()) throw Error(ErrorCode::kDimensionMismatch, "linear policy logvar");
  PolicyArch arch{a.cols(), a.rows(), MeanHead::kLinear, VarianceHead::kConstant, {}};
  GaussianPolicy p;
  p.arch_ = arch;
  p.layout();
  std::copy(a.data().begin(), a.data().end(), p.params_.segment("mean_weights").begin());
  std::copy(logvar.begin(), logvar.end(), p.params_.segment("log_var").begin());
  p.project();
  return p;
}

GaussianPolicy::Prediction GaussianPolicy::predict(const Matrix& x) const {
  Tape<double> tape;
  const Var p = tape.leaf(std::span<const double>(params_.values()));
  const GaussianHeads heads = forward(tape, p, x);
  return {tape.value(heads.mean), tape.value(heads.logvar)};
}

void GaussianPolicy::project() {
  if (arch_.variance != VarianceHead::kConstant) return;
  for (double& v : params_.segment("log_var")) v = std::clamp(v, kLogVarMin, kLogVarMax);
}

Sample policy_sample_with_noise(const GaussianPolicy& p, std::span<const double> x,
                                std::span<const double> noise) {
  if (noise.size() != p.output_dim()) throw Error(ErrorCode::kDimensionMismatch, "noise dim");
  const auto pred = p.predict(row_matrix(x));
  Sample s;
  s.noise.assign(noise.begin(), noise.end());
  s.value.resize(p.output_dim());
  for (std::size_t j = 0; j < p.output_dim(); ++j) {
    s.value[j] = pred.mean[j] + std::exp(0.5 * pred.logvar[j]) * noise[j];
  }
  s.log_prob = gaussian_log_density(s.value, pred.mean.data(), pred.logvar.data());
  return s;
}

Sample policy_sample(const GaussianPolicy& p, std::span<const double> x, Rng& rng) {
  Vector z(p.output_dim());
  for (double& v : z) v = rng.normal();
  return policy_sample_with_noise(p, x, z);
}

double log_prob(const GaussianPolicy& p, std::span<const double> x, std::span<const double> y) {
  const auto pred = p.predict(row_matrix(x));
  return gaussian_log_density(y, pred.mean.data(), pred.logvar.data());
}

double entropy(const GaussianPolicy& p, std::span<const double> x) {
  const auto pred = p.predict(row_matrix(x));
  double h = 0.0;
  for (double lv : pred.logvar.data()) h += 0.5 * (kLog2Pi + 1.0 + lv);
  return h;
}

// ---------------------------------------------------------------------------
// CategoricalPolicy

void CategoricalPolicy::layout() {
  if (features_ == 0 || classes_ < 2) throw Error(ErrorCode::kConfigError, "classifier needs >=2 classes");
  params_.add_segment("logits_weights", classes_ * features_);
  params_.add_segment("logits_bias", classes_);
}

CategoricalPolicy::CategoricalPolicy(std::size_t features, std::size_t classes, Rng& rng)
    : features_(features), classes_(classes) {
  layout();
  const double bound = 1.0 / std::sqrt(static_cast<double>(features_));
  fill_uniform(params_.segment("logits_weights"), bound, rng);
  fill_uniform(params_.segment("logits_bias"), bound, rng);
}

CategoricalPolicy::CategoricalPolicy(std::size_t features, std::size_t classes, ParamVector params)
    : features_(features), classes_(classes) {
  layout();
  if (params.size() != params_.size() || params.segments().size() != params_.segments().size()) {
    throw Error(ErrorCode::kFormatError, "segment map does not match classifier");
  }
  params_ = std::move(params);
}

Matrix CategoricalPolicy::log_probabilities(const Matrix& x) const {
  Tape<double> tape;
  const Var p = tape.leaf(std::span<const double>(params_.values()));
  return tape.value(log_probs(tape, p, x));
}

Matrix CategoricalPolicy::probabilities(const Matrix& x) const {
  Matrix lp = log_probabilities(x);
  for (double& v : lp.data()) v = std::exp(v);
  return lp;
}

Sample categorical_sample(const CategoricalPolicy& p, std::span<const double> x, Rng& rng) {
  const Matrix lp = p.log_probabilities(row_matrix(x));
  Vector probs(lp.cols());
  for (std::size_t k = 0; k < probs.size(); ++k) probs[k] = std::exp(lp[k]);
  Sample s;
  s.label = rng.categorical(probs);
  s.log_prob = lp[s.label];
  return s;
}

double categorical_entropy(const CategoricalPolicy& p, std::span<const double> x) {
  const Matrix lp = p.log_probabilities(row_matrix(x));
  double h = 0.0;
  for (double v : lp.data()) h -= std::exp(v) * v;
  return h;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr std::array<char, 8> kMagic{'N', 'L', 'L', 'P', 'O', 'C', 'K', '1'};

void write_u64(std::ostream& os, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) os.put(static_cast<char>((v >> (8 * i)) & 0xFF));
}

std::uint64_t read_u64(std::istream& is) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) {
    const int c = is.get();
    if (c == EOF) throw Error(ErrorCode::kFormatError, "truncated checkpoint");
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(c)) << (8 * i);
  }
  return v;
}

nlohmann::json segments_json(const ParamVector& p) {
  nlohmann::json segs = nlohmann::json::array();
  for (const Segment& s : p.segments()) {
    segs.push_back({{"name", s.name}, {"offset", s.offset}, {"size", s.size}});
  }
  return segs;
}

ParamVector segments_from_json(const nlohmann::json& segs, std::size_t count) {
  ParamVector p;
  for (const auto& s : segs) {
    const Segment& added = p.add_segment(s.at("name").get<std::string>(), s.at("size").get<std::size_t>());
    if (added.offset != s.at("offset").get<std::size_t>()) {
      throw Error(ErrorCode::kFormatError, "segments are not contiguous");
    }
  }
  if (p.size() != count) throw Error(ErrorCode::kFormatError, "segment map does not cover payload");
  return p;
}

const char* to_string(MeanHead h) { return h == MeanHead::kLinear ? "linear" : "mlp"; }
const char* to_string(VarianceHead h) { return h == VarianceHead::kConstant ? "constant" : "mlp"; }

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const AnyPolicy& policy) {
  nlohmann::json header;
  header["format"] = "nllpo-checkpoint";
  header["version"] = 1;
  const ParamVector* params = nullptr;
  if (const auto* g = std::get_if<GaussianPolicy>(&policy)) {
    header["model"] = "gaussian";
    header["arch"] = {{"input_dim", g->arch().input_dim},
                      {"output_dim", g->arch().output_dim},
                      {"mean", to_string(g->arch().mean)},
                      {"variance", to_string(g->arch().variance)},
                      {"hidden", g->arch().hidden}};
    params = &g->params();
  } else {
    const auto& c = std::get<CategoricalPolicy>(policy);
    header["model"] = "categorical";
    header["arch"] = {{"features", c.features()}, {"classes", c.classes()}};
    params = &c.params();
  }
  header["segments"] = segments_json(*params);
  header["count"] = params->size();
  const std::string text = header.dump();

  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error(ErrorCode::kIoError, "cannot open " + path.string());
  os.write(kMagic.data(), kMagic.size());
  write_u64(os, text.size());
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (double v : params->values()) {
    std::uint64_t bits = 0;
    std::memcpy(&bits, &v, sizeof bits);
    write_u64(os, bits);
  }
  if (!os) throw Error(ErrorCode::kIoError, "failed writing " + path.string());
}

AnyPolicy load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error(ErrorCode::kIoError, "cannot open " + path.string());
  std::array<char, 8> magic{};
  is.read(magic.data(), magic.size());
  if (!is || magic != kMagic) throw Error(ErrorCode::kFormatError, "not a checkpoint file");
  const std::uint64_t len = read_u64(is);
  std::string text(len, '\0');
  is.read(text.data(), static_cast<std::streamsize>(len));
  if (!is) throw Error(ErrorCode::kFormatError, "truncated checkpoint header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kFormatError, e.what());
  }
  // header fields are validated by json::at; surface their failures as format errors
  try {
    const std::size_t count = header.at("count").get<std::size_t>();
    ParamVector params = segments_from_json(header.at("segments"), count);
    for (double& v : params.values()) {
      const std::uint64_t bits = read_u64(is);
      std::memcpy(&v, &bits, sizeof v);
    }
    const auto& arch = header.at("arch");
    if (header.at("model") == "gaussian") {
      PolicyArch a;
      a.input_dim = arch.at("input_dim").get<std::size_t>();
      a.output_dim = arch.at("output_dim").get<std::size_t>();
      a.mean = arch.at("mean") == "linear" ? MeanHead::kLinear : MeanHead::kMlp;
      a.variance = arch.at("variance") == "constant" ? VarianceHead::kConstant : VarianceHead::kMlp;
      a.hidden = arch.at("hidden").get<std::vector<std::size_t>>();
      return GaussianPolicy(std::move(a), std::move(params));
    }
    return CategoricalPolicy(arch.at("features").get<std::size_t>(), arch.at("classes").get<std::size_t>(),
                             std::move(params));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kFormatError, std::string("bad checkpoint header: ") + e.what());
  }
}

}  // namespace nllpo
