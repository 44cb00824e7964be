#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "nllpo/matrix.hpp"
#include "nllpo/models.hpp"

namespace nllpo {

enum class TaskKind { kRegression, kClassification };
enum class Split { kTrain, kVal, kTest };

/// Rows handed to a loss: inputs plus continuous targets or class labels.
struct Batch {
  Matrix x;
  Matrix y;                         ///< N×n targets (regression)
  std::vector<std::size_t> labels;  ///< class indices (classification)
  std::size_t classes = 0;

  std::size_t size() const noexcept { return x.rows(); }
  bool categorical() const noexcept { return classes > 0; }
  /// N×K one-hot encoding of `labels`.
  Matrix one_hot() const;
};

struct Dataset {
  TaskKind task = TaskKind::kRegression;
  Matrix inputs;                    ///< N×m
  Matrix targets;                   ///< N×n (regression)
  std::vector<std::size_t> labels;  ///< N (classification)
  std::size_t classes = 0;
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
  std::vector<std::size_t> test;
  std::string provenance;

  std::size_t size() const noexcept { return inputs.rows(); }
  std::size_t input_dim() const noexcept { return inputs.cols(); }
  /// n for regression, K for classification.
  std::size_t target_dim() const noexcept {
    return task == TaskKind::kClassification ? classes : targets.cols();
  }
  const std::vector<std::size_t>& indices(Split s) const;
  Batch batch(std::span<const std::size_t> rows) const;
  Batch split(Split s) const { return batch(indices(s)); }
  /// Checks shapes, finiteness, and that the splits are disjoint and cover all rows.
  void validate() const;
};

/// Deterministic 80/10/10 split of a seeded permutation of 0..n-1.
void assign_splits(Dataset& data, std::uint64_t seed);

struct SyntheticData {
  Dataset data;
  LinearGaussianTruth truth;
};

/// Λ entries uniform in [-1,1], inputs uniform on [-5,5]^m, Y | X ~ N(ΛX, β²I).
SyntheticData generate_synthetic(std::size_t n, std::size_t m, std::size_t count, double beta,
                                 std::uint64_t seed);

/// Gaussian class clusters around random centres with a shared linear
/// separation; stands in for a tabular benchmark in CI.
Dataset generate_classification(std::size_t count, std::size_t features, std::size_t classes,
                                double separation, double imbalance, std::uint64_t seed);

/// Dynamics-style regression: x = (state, action), y = next-state delta from a
/// smooth nonlinear map with state-dependent noise.
Dataset generate_dynamics(std::size_t count, std::size_t state_dim, std::size_t action_dim,
                          std::uint64_t seed);

struct CsvSchema {
  std::vector<std::string> features;
  std::vector<std::string> targets;  ///< one label column for classification
  TaskKind task = TaskKind::kRegression;
  std::uint64_t seed = 0;
  bool standardize = true;
};

/// Reads a header-row CSV. Features are standardised with train-split
/// statistics (std floored at 1e-12); class labels map to contiguous indices in
/// order of first appearance after sorting.
Dataset load_csv(const std::filesystem::path& path, const CsvSchema& schema);

/// Writes inputs then targets (or the label column) with a generated header
/// `x0..x{m-1}, y0..y{n-1}` or `label`. Values use round-trip precision.
void write_csv(const std::filesystem::path& path, const Dataset& data);

}  // namespace nllpo
