#include "nllpo/dataset.hpp"

#include <algorithm>
#include <charconv>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <string>

namespace nllpo {

Matrix Batch::one_hot() const {
  Matrix m(labels.size(), classes);
  for (std::size_t i = 0; i < labels.size(); ++i) m(i, labels[i]) = 1.0;
  return m;
}

const std::vector<std::size_t>& Dataset::indices(Split s) const {
  switch (s) {
    case Split::kTrain: return train;
    case Split::kVal: return val;
    case Split::kTest: return test;
  }
  return train;
}

Batch Dataset::batch(std::span<const std::size_t> rows) const {
  Batch b;
  const std::size_t m = input_dim();
  b.x = Matrix(rows.size(), m);
  const bool cls = task == TaskKind::kClassification;
  if (cls) {
    b.classes = classes;
    b.labels.reserve(rows.size());
  } else {
    b.y = Matrix(rows.size(), targets.cols());
  }
  for (std::size_t k = 0; k < rows.size(); ++k) {
    const std::size_t r = rows[k];
    if (r >= size()) throw Error(ErrorCode::kDimensionMismatch, "batch row out of range");
    std::copy_n(inputs.row(r).begin(), m, b.x.row(k).begin());
    if (cls) {
      b.labels.push_back(labels[r]);
    } else {
      std::copy_n(targets.row(r).begin(), targets.cols(), b.y.row(k).begin());
    }
  }
  return b;
}

void Dataset::validate() const {
  if (size() == 0) throw Error(ErrorCode::kEmptyFile, "dataset has no rows");
  if (!all_finite(inputs)) throw Error(ErrorCode::kNonNumericCell, "non-finite input value");
  if (task == TaskKind::kRegression) {
    if (targets.rows() != size()) throw Error(ErrorCode::kDimensionMismatch, "targets rows != inputs rows");
    if (!all_finite(targets)) throw Error(ErrorCode::kNonNumericCell, "non-finite target value");
  } else {
    if (labels.size() != size()) throw Error(ErrorCode::kDimensionMismatch, "labels size != inputs rows");
    if (classes < 2) throw Error(ErrorCode::kFormatError, "classification needs at least 2 classes");
    for (std::size_t l : labels) {
      if (l >= classes) throw Error(ErrorCode::kFormatError, "label index out of range");
    }
  }
  std::vector<char> seen(size(), 0);
  for (const auto* part : {&train, &val, &test}) {
    for (std::size_t r : *part) {
      if (r >= size() || seen[r]) throw Error(ErrorCode::kFormatError, "splits overlap or out of range");
      seen[r] = 1;
    }
  }
  if (std::find(seen.begin(), seen.end(), 0) != seen.end()) {
    throw Error(ErrorCode::kFormatError, "splits do not cover every row");
  }
}

void assign_splits(Dataset& data, std::uint64_t seed) {
  const std::size_t n = data.size();
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng(seed ^ 0x5eed5b1175ULL);
  rng.shuffle(perm.begin(), perm.end());
  const std::size_t n_train = (n * 8) / 10;
  const std::size_t n_val = n / 10;
  data.train.assign(perm.begin(), perm.begin() + n_train);
  data.val.assign(perm.begin() + n_train, perm.begin() + n_train + n_val);
  data.test.assign(perm.begin() + n_train + n_val, perm.end());
  // keep each split sorted so batches read rows in a stable order
  std::sort(data.train.begin(), data.train.end());
  std::sort(data.val.begin(), data.val.end());
  std::sort(data.test.begin(), data.test.end());
}

SyntheticData generate_synthetic(std::size_t n, std::size_t m, std::size_t count, double beta,
                                 std::uint64_t seed) {
  if (n == 0 || m == 0 || count == 0 || !(beta > 0.0)) {
    throw Error(ErrorCode::kConfigError, "generate_synthetic needs positive n, m, N, beta");
  }
  Rng rng(seed);
  Matrix lambda(n, m);
  for (double& v : lambda.data()) v = rng.uniform(-1.0, 1.0);
  LinearGaussianTruth truth{std::move(lambda), SpdMatrix::scaled_identity(n, beta * beta)};

  Dataset d;
  d.task = TaskKind::kRegression;
  d.inputs = Matrix(count, m);
  d.targets = Matrix(count, n);
  for (std::size_t i = 0; i < count; ++i) {
    for (double& v : d.inputs.row(i)) v = rng.uniform(-5.0, 5.0);
    const Vector y = truth_sample(truth, d.inputs.row(i), rng);
    std::copy(y.begin(), y.end(), d.targets.row(i).begin());
  }
  std::ostringstream prov;
  prov << "synthetic n=" << n << " m=" << m << " N=" << count << " beta=" << beta << " seed=" << seed;
  d.provenance = prov.str();
  assign_splits(d, seed);
  return {std::move(d), std::move(truth)};
}

Dataset generate_classification(std::size_t count, std::size_t features, std::size_t classes,
                                double separation, double imbalance, std::uint64_t seed) {
  if (count == 0 || features == 0 || classes < 2) {
    throw Error(ErrorCode::kConfigError, "generate_classification needs N>0, features>0, classes>=2");
  }
  if (!(imbalance >= 0.0 && imbalance < 1.0)) {
    throw Error(ErrorCode::kConfigError, "imbalance must lie in [0,1)");
  }
  Rng rng(seed);
  Matrix centres(classes, features);
  for (double& v : centres.data()) v = separation * rng.normal();
  // class c has prior weight (1-imbalance)^c
  Vector prior(classes);
  for (std::size_t c = 0; c < classes; ++c) prior[c] = std::pow(1.0 - imbalance, static_cast<double>(c));
  const double total = std::accumulate(prior.begin(), prior.end(), 0.0);
  for (double& p : prior) p /= total;

  Dataset d;
  d.task = TaskKind::kClassification;
  d.classes = classes;
  d.inputs = Matrix(count, features);
  d.labels.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t c = rng.categorical(prior);
    d.labels[i] = c;
    for (std::size_t j = 0; j < features; ++j) d.inputs(i, j) = centres(c, j) + rng.normal();
  }
  std::ostringstream prov;
  prov << "classification N=" << count << " features=" << features << " K=" << classes
       << " separation=" << separation << " imbalance=" << imbalance << " seed=" << seed;
  d.provenance = prov.str();
  assign_splits(d, seed);
  return d;
}

Dataset generate_dynamics(std::size_t count, std::size_t state_dim, std::size_t action_dim,
                          std::uint64_t seed) {
  if (count == 0 || state_dim == 0) throw Error(ErrorCode::kConfigError, "generate_dynamics needs N>0, state_dim>0");
  Rng rng(seed);
  const std::size_t m = state_dim + action_dim;
  Matrix w(state_dim, m);
  for (double& v : w.data()) v = rng.normal() / std::sqrt(static_cast<double>(m));

  Dataset d;
  d.task = TaskKind::kRegression;
  d.inputs = Matrix(count, m);
  d.targets = Matrix(count, state_dim);
  for (std::size_t i = 0; i < count; ++i) {
    auto x = d.inputs.row(i);
    for (double& v : x) v = rng.uniform(-1.0, 1.0);
    const Vector pre = matvec(w, x);
    for (std::size_t j = 0; j < state_dim; ++j) {
      const double s = x[j];
      const double mean = 0.5 * std::tanh(2.0 * pre[j]) + 0.1 * std::sin(3.0 * s);
      // heteroscedastic: noise grows with |state|
      const double sd = 0.05 * (1.0 + 2.0 * std::abs(s));
      d.targets(i, j) = mean + sd * rng.normal();
    }
  }
  std::ostringstream prov;
  prov << "dynamics N=" << count << " state=" << state_dim << " action=" << action_dim << " seed=" << seed;
  d.provenance = prov.str();
  assign_splits(d, seed);
  return d;
}

namespace {

std::string trim(std::string s) {
  const auto not_space = [](unsigned char c) { return !std::isspace(c); };
  s.erase(s.begin(), std::find_if(s.begin(), s.end(), not_space));
  s.erase(std::find_if(s.rbegin(), s.rend(), not_space).base(), s.end());
  if (s.size() >= 2 && s.front() == '"' && s.back() == '"') s = s.substr(1, s.size() - 2);
  return s;
}

std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) out.push_back(trim(cell));
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

bool parse_number(const std::string& s, double& out) {
  if (s.empty()) return false;
  const char* first = s.data();
  const char* last = s.data() + s.size();
  if (*first == '+') ++first;
  const auto [ptr, ec] = std::from_chars(first, last, out);
  return ec == std::errc() && ptr == last && std::isfinite(out);
}

std::string cell_where(std::size_t row, const std::string& col) {
  return "row " + std::to_string(row) + ", column '" + col + "'";
}

}  // namespace

Dataset load_csv(const std::filesystem::path& path, const CsvSchema& schema) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIoError, "cannot open " + path.string());
  if (schema.features.empty()) throw Error(ErrorCode::kConfigError, "csv schema lists no feature columns");
  if (schema.targets.empty()) throw Error(ErrorCode::kConfigError, "csv schema lists no target columns");
  const bool cls = schema.task == TaskKind::kClassification;
  if (cls && schema.targets.size() != 1) {
    throw Error(ErrorCode::kConfigError, "classification expects exactly one label column");
  }

  std::string line;
  std::vector<std::string> header;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!trim(line).empty()) {
      header = split_line(line);
      break;
    }
  }
  if (header.empty()) throw Error(ErrorCode::kEmptyFile, path.string() + " has no header row");

  auto column = [&](const std::string& name) {
    const auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw Error(ErrorCode::kMissingColumn, "missing column '" + name + "'");
    return static_cast<std::size_t>(it - header.begin());
  };
  std::vector<std::size_t> fcols, tcols;
  for (const auto& f : schema.features) fcols.push_back(column(f));
  for (const auto& t : schema.targets) tcols.push_back(column(t));

  std::vector<double> feats, targs;
  std::vector<std::string> raw_labels;
  std::size_t rows = 0;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (trim(line).empty()) continue;
    const auto cells = split_line(line);
    ++rows;
    auto cell = [&](std::size_t c, const std::string& name) -> const std::string& {
      if (c >= cells.size()) {
        throw Error(ErrorCode::kNonNumericCell, "missing cell at " + cell_where(rows, name) +
                                                    " (line " + std::to_string(line_no) + ")");
      }
      return cells[c];
    };
    auto numeric = [&](std::size_t c, const std::string& name) {
      double v = 0.0;
      if (!parse_number(cell(c, name), v)) {
        throw Error(ErrorCode::kNonNumericCell, "non-numeric cell '" + cells[c] + "' at " +
                                                    cell_where(rows, name) + " (line " +
                                                    std::to_string(line_no) + ")");
      }
      return v;
    };
    for (std::size_t k = 0; k < fcols.size(); ++k) feats.push_back(numeric(fcols[k], schema.features[k]));
    if (cls) {
      raw_labels.push_back(cell(tcols[0], schema.targets[0]));
    } else {
      for (std::size_t k = 0; k < tcols.size(); ++k) targs.push_back(numeric(tcols[k], schema.targets[k]));
    }
  }
  if (rows == 0) throw Error(ErrorCode::kEmptyFile, path.string() + " has no data rows");

  Dataset d;
  d.task = schema.task;
  d.inputs = Matrix(rows, fcols.size(), std::move(feats));
  if (cls) {
    // numeric labels sort numerically, anything else lexicographically
    bool all_numeric = true;
    double tmp = 0.0;
    for (const auto& l : raw_labels) all_numeric = all_numeric && parse_number(l, tmp);
    std::vector<std::string> uniq(raw_labels.begin(), raw_labels.end());
    std::sort(uniq.begin(), uniq.end());
    uniq.erase(std::unique(uniq.begin(), uniq.end()), uniq.end());
    if (all_numeric) {
      std::stable_sort(uniq.begin(), uniq.end(), [](const std::string& a, const std::string& b) {
        double x = 0.0, y = 0.0;
        parse_number(a, x);
        parse_number(b, y);
        return x < y;
      });
    }
    std::map<std::string, std::size_t> index;
    for (std::size_t c = 0; c < uniq.size(); ++c) index[uniq[c]] = c;
    d.classes = uniq.size();
    d.labels.reserve(rows);
    for (const auto& l : raw_labels) d.labels.push_back(index.at(l));
  } else {
    d.targets = Matrix(rows, tcols.size(), std::move(targs));
  }
  d.provenance = "csv " + path.string() + " seed=" + std::to_string(schema.seed);
  assign_splits(d, schema.seed);

  if (schema.standardize) {
    const std::size_t m = d.input_dim();
    const auto& fit_rows = d.train.empty() ? d.indices(Split::kTest) : d.train;
    for (std::size_t j = 0; j < m; ++j) {
      double mean = 0.0;
      for (std::size_t r : fit_rows) mean += d.inputs(r, j);
      mean /= static_cast<double>(fit_rows.size());
      double var = 0.0;
      for (std::size_t r : fit_rows) var += (d.inputs(r, j) - mean) * (d.inputs(r, j) - mean);
      const double sd = std::max(std::sqrt(var / static_cast<double>(fit_rows.size())), 1e-12);
      for (std::size_t r = 0; r < rows; ++r) {
        const double z = (d.inputs(r, j) - mean) / sd;
        // constant columns come out exactly zero rather than rounding noise
        d.inputs(r, j) = var == 0.0 ? 0.0 : z;
      }
    }
  }
  if (cls && d.classes < 2) throw Error(ErrorCode::kFormatError, "label column has fewer than 2 classes");
  d.validate();
  return d;
}

void write_csv(const std::filesystem::path& path, const Dataset& data) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::kIoError, "cannot write " + path.string());
  const std::size_t m = data.input_dim();
  const bool cls = data.task == TaskKind::kClassification;
  for (std::size_t j = 0; j < m; ++j) out << (j ? "," : "") << 'x' << j;
  if (cls) {
    out << ",label";
  } else {
    for (std::size_t j = 0; j < data.targets.cols(); ++j) out << ",y" << j;
  }
  out << '\n';
  char buf[32];
  auto put = [&](double v) {
    std::snprintf(buf, sizeof buf, "%.17g", v);
    out << buf;
  };
  for (std::size_t i = 0; i < data.size(); ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      if (j) out << ',';
      put(data.inputs(i, j));
    }
    if (cls) {
      out << ',' << data.labels[i];
    } else {
      for (std::size_t j = 0; j < data.targets.cols(); ++j) {
        out << ',';
        put(data.targets(i, j));
      }
    }
    out << '\n';
  }
  if (!out) throw Error(ErrorCode::kIoError, "write failed for " + path.string());
}

}  // namespace nllpo
