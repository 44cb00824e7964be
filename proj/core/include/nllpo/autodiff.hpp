#pragma once

#include <cmath>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "nllpo/dual.hpp"
#include "nllpo/error.hpp"
#include "nllpo/matrix.hpp"
#include "nllpo/tape.hpp"

namespace nllpo {

struct Segment {
  std::string name;
  std::size_t offset = 0;
  std::size_t size = 0;

  friend bool operator==(const Segment&, const Segment&) = default;
};

/// Flat parameter array with named, disjoint, covering segments.
class ParamVector {
 public:
  /// Appends a segment of `size` entries initialised to `fill`.
  Segment& add_segment(std::string name, std::size_t size, double fill = 0.0);

  std::size_t size() const noexcept { return values_.size(); }
  std::vector<double>& values() noexcept { return values_; }
  const std::vector<double>& values() const noexcept { return values_; }
  const std::vector<Segment>& segments() const noexcept { return segments_; }

  bool has_segment(std::string_view name) const;
  const Segment& find(std::string_view name) const;
  std::span<double> segment(std::string_view name);
  std::span<const double> segment(std::string_view name) const;

  bool all_finite() const;

  friend bool operator==(const ParamVector&, const ParamVector&) = default;

 private:
  std::vector<double> values_;
  std::vector<Segment> segments_;
};

struct ValueAndGradient {
  double value = 0.0;
  Vector gradient;
};

namespace detail {

inline void check_finite_root(double v) {
  if (!std::isfinite(v)) throw Error(ErrorCode::kNonFiniteLoss, "loss evaluated to a non-finite value");
}

inline std::vector<Dual> seed(std::span<const double> at, std::span<const double> dir) {
  std::vector<Dual> out(at.size());
  for (std::size_t i = 0; i < at.size(); ++i) out[i] = Dual(at[i], dir.empty() ? 0.0 : dir[i]);
  return out;
}

inline Vector tangents(const BasicMatrix<Dual>& m) {
  Vector out(m.size());
  for (std::size_t i = 0; i < m.size(); ++i) out[i] = m[i].d;
  return out;
}

}  // namespace detail

// A loss is any callable `Var loss(Tape<T>& tape, Var params)` that is generic
// in T, e.g. a lambda taking `auto& tape`. It must return a 1×1 node.

template <class Loss>
ValueAndGradient value_and_gradient(const Loss& loss, std::span<const double> at) {
  Tape<double> tape;
  const Var p = tape.leaf(at);
  const Var root = loss(tape, p);
  const double v = tape.scalar(root);
  detail::check_finite_root(v);
  tape.backward(root);
  const auto g = tape.grad(p);
  return {v, Vector(g.data().begin(), g.data().end())};
}

template <class Loss>
Vector gradient(const Loss& loss, std::span<const double> at) {
  return value_and_gradient(loss, at).gradient;
}

/// (∇² loss)·v by a reverse sweep over dual numbers seeded with v.
template <class Loss>
Vector hvp(const Loss& loss, std::span<const double> at, std::span<const double> v) {
  if (v.size() != at.size()) throw Error(ErrorCode::kDimensionMismatch, "hvp direction length");
  Tape<Dual> tape;
  const auto seeded = detail::seed(at, v);
  const Var p = tape.leaf(std::span<const Dual>(seeded));
  const Var root = loss(tape, p);
  detail::check_finite_root(tape.scalar(root));
  tape.backward(root);
  return detail::tangents(tape.grad(p));
}

// Joint losses take `(Tape<T>&, Var phi, Var theta)`.

template <class JointLoss>
ValueAndGradient value_and_theta_gradient(const JointLoss& loss, std::span<const double> phi,
                                          std::span<const double> theta) {
  Tape<double> tape;
  const Var vp = tape.leaf(phi);
  const Var vt = tape.leaf(theta);
  const Var root = loss(tape, vp, vt);
  const double v = tape.scalar(root);
  detail::check_finite_root(v);
  tape.backward(root);
  const auto g = tape.grad(vt);
  return {v, Vector(g.data().begin(), g.data().end())};
}

struct JointHvp {
  Vector phi_part;    ///< ∇_φ∇_θ L · v
  Vector theta_part;  ///< ∇²_θ L · v
};

/// One forward-over-reverse pass with the direction (0, v): returns both the
/// mixed block and the θθ block of the Hessian applied to v.
template <class JointLoss>
JointHvp joint_hvp(const JointLoss& loss, std::span<const double> phi, std::span<const double> theta,
                   std::span<const double> v) {
  if (v.size() != theta.size()) throw Error(ErrorCode::kDimensionMismatch, "joint hvp direction length");
  Tape<Dual> tape;
  const auto sp = detail::seed(phi, {});
  const auto st = detail::seed(theta, v);
  const Var vp = tape.leaf(std::span<const Dual>(sp));
  const Var vt = tape.leaf(std::span<const Dual>(st));
  const Var root = loss(tape, vp, vt);
  detail::check_finite_root(tape.scalar(root));
  tape.backward(root);
  return {detail::tangents(tape.grad(vp)), detail::tangents(tape.grad(vt))};
}

/// ∇_φ ⟨∇_θ L(φ, θ), v⟩ with v held constant.
template <class JointLoss>
Vector cross_grad(const JointLoss& loss, std::span<const double> phi, std::span<const double> theta,
                  std::span<const double> v) {
  return joint_hvp(loss, phi, theta, v).phi_part;
}

}  // namespace nllpo
