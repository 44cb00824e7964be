#pragma once

#include <cmath>
#include <cstdint>
#include <deque>
#include <span>
#include <string>
#include <vector>

#include "nllpo/dual.hpp"
#include "nllpo/error.hpp"
#include "nllpo/matrix.hpp"

namespace nllpo {

/// Handle to a node recorded on a Tape.
struct Var {
  int id = -1;
};

enum class OpKind : std::uint8_t {
  kLeaf,
  kConstant,
  kSlice,
  kAdd,
  kSub,
  kMul,
  kAddRow,
  kMulRow,
  kMulCol,
  kScale,
  kAddScalar,
  kScaleBy,
  kMatMul,
  kTranspose,
  kExp,
  kLog,
  kTanh,
  kRelu,
  kSquare,
  kClamp,
  kSum,
  kRowSum,
  kLogSoftmaxRows,
  kBroadcastRows,
  kDiagPart,
  kDiagEmbed,
};

/// Define-by-run reverse-mode tape over 2-D matrices. Values are computed
/// eagerly as nodes are appended, so node order is a topological order.
///
/// With T = double the reverse sweep yields gradients. With T = Dual and the
/// leaf tangents seeded with a direction v, the same sweep carries the
/// directional derivative of every adjoint, which for the leaf is H·v
/// (forward-over-reverse).
template <class T>
class Tape {
 public:
  using Mat = BasicMatrix<T>;

  std::size_t size() const noexcept { return nodes_.size(); }

  Var leaf(std::span<const T> values) {
    return push(OpKind::kLeaf, -1, -1, Mat(values.size(), 1, std::vector<T>(values.begin(), values.end())));
  }
  Var leaf(Mat m) { return push(OpKind::kLeaf, -1, -1, std::move(m)); }

  Var constant(const Matrix& m) {
    Mat v(m.rows(), m.cols());
    for (std::size_t k = 0; k < m.size(); ++k) v[k] = T(m[k]);
    return push(OpKind::kConstant, -1, -1, std::move(v));
  }
  Var constant_scalar(double x) { return constant(Matrix(1, 1, x)); }

  /// Reinterprets `count = rows*cols` contiguous entries of `x` starting at
  /// `offset` as a rows×cols row-major matrix.
  Var slice(Var x, std::size_t offset, std::size_t rows, std::size_t cols) {
    const Mat& a = val(x);
    if (offset + rows * cols > a.size()) {
      throw Error(ErrorCode::kDimensionMismatch, "slice out of range");
    }
    Mat out(rows, cols);
    for (std::size_t k = 0; k < rows * cols; ++k) out[k] = a[offset + k];
    Var r = push(OpKind::kSlice, x.id, -1, std::move(out));
    nodes_[r.id].offset = offset;
    return r;
  }

  Var add(Var a, Var b) { return binary_same(OpKind::kAdd, a, b, [](const T& x, const T& y) { return x + y; }); }
  Var sub(Var a, Var b) { return binary_same(OpKind::kSub, a, b, [](const T& x, const T& y) { return x - y; }); }
  Var mul(Var a, Var b) { return binary_same(OpKind::kMul, a, b, [](const T& x, const T& y) { return x * y; }); }

  /// a (r×c) plus row vector b (1×c) added to every row.
  Var add_row(Var a, Var b) {
    const Mat& x = val(a);
    const Mat& y = val(b);
    if (y.rows() != 1 || y.cols() != x.cols()) throw Error(ErrorCode::kDimensionMismatch, "add_row");
    Mat out = x;
    for (std::size_t i = 0; i < x.rows(); ++i)
      for (std::size_t j = 0; j < x.cols(); ++j) out(i, j) += y[j];
    return push(OpKind::kAddRow, a.id, b.id, std::move(out));
  }

  /// a (r×c) scaled column-wise by row vector b (1×c).
  Var mul_row(Var a, Var b) {
    const Mat& x = val(a);
    const Mat& y = val(b);
    if (y.rows() != 1 || y.cols() != x.cols()) throw Error(ErrorCode::kDimensionMismatch, "mul_row");
    Mat out = x;
    for (std::size_t i = 0; i < x.rows(); ++i)
      for (std::size_t j = 0; j < x.cols(); ++j) out(i, j) *= y[j];
    return push(OpKind::kMulRow, a.id, b.id, std::move(out));
  }

  /// a (r×c) scaled row-wise by column vector b (r×1).
  Var mul_col(Var a, Var b) {
    const Mat& x = val(a);
    const Mat& y = val(b);
    if (y.cols() != 1 || y.rows() != x.rows()) throw Error(ErrorCode::kDimensionMismatch, "mul_col");
    Mat out = x;
    for (std::size_t i = 0; i < x.rows(); ++i)
      for (std::size_t j = 0; j < x.cols(); ++j) out(i, j) *= y[i];
    return push(OpKind::kMulCol, a.id, b.id, std::move(out));
  }

  Var scale(Var a, double k) {
    Mat out = val(a);
    for (T& v : out.data()) v = v * k;
    Var r = push(OpKind::kScale, a.id, -1, std::move(out));
    nodes_[r.id].k0 = k;
    return r;
  }
  Var neg(Var a) { return scale(a, -1.0); }

  Var add_scalar(Var a, double k) {
    Mat out = val(a);
    for (T& v : out.data()) v = v + T(k);
    return push(OpKind::kAddScalar, a.id, -1, std::move(out));
  }

  /// Matrix a times the 1×1 node s.
  Var scale_by(Var a, Var s) {
    const Mat& sv = val(s);
    if (sv.size() != 1) throw Error(ErrorCode::kDimensionMismatch, "scale_by expects a 1x1 factor");
    Mat out = val(a);
    const T f = sv[0];
    for (T& v : out.data()) v = v * f;
    return push(OpKind::kScaleBy, a.id, s.id, std::move(out));
  }

  Var matmul(Var a, Var b) {
    const Mat& x = val(a);
    const Mat& y = val(b);
    if (x.cols() != y.rows()) throw Error(ErrorCode::kDimensionMismatch, "matmul inner dims");
    Mat out(x.rows(), y.cols());
    gemm_acc(x, false, y, false, out);
    return push(OpKind::kMatMul, a.id, b.id, std::move(out));
  }

  Var transpose(Var a) {
    const Mat& x = val(a);
    Mat out(x.cols(), x.rows());
    for (std::size_t i = 0; i < x.rows(); ++i)
      for (std::size_t j = 0; j < x.cols(); ++j) out(j, i) = x(i, j);
    return push(OpKind::kTranspose, a.id, -1, std::move(out));
  }

  Var exp(Var a) { return unary(OpKind::kExp, a, [](const T& x) { using std::exp; return exp(x); }); }
  Var log(Var a) { return unary(OpKind::kLog, a, [](const T& x) { using std::log; return log(x); }); }
  Var tanh(Var a) { return unary(OpKind::kTanh, a, [](const T& x) { using std::tanh; return tanh(x); }); }
  Var relu(Var a) { return unary(OpKind::kRelu, a, [](const T& x) { return x > T(0.0) ? x : T(0.0); }); }
  Var square(Var a) { return unary(OpKind::kSquare, a, [](const T& x) { return x * x; }); }

  /// Elementwise clamp to [lo, hi]; the derivative is zero outside the box.
  Var clamp(Var a, double lo, double hi) {
    Var r = unary(OpKind::kClamp, a, [lo, hi](const T& x) {
      if (value_of(x) < lo) return T(lo);
      if (value_of(x) > hi) return T(hi);
      return x;
    });
    nodes_[r.id].k0 = lo;
    nodes_[r.id].k1 = hi;
    return r;
  }

  Var sum(Var a) {
    const Mat& x = val(a);
    T s(0.0);
    for (const T& v : x.data()) s += v;
    return push(OpKind::kSum, a.id, -1, Mat(1, 1, s));
  }
  Var mean(Var a) {
    const double n = static_cast<double>(val(a).size());
    if (n == 0) throw Error(ErrorCode::kEmptyBatch, "mean of empty matrix");
    return scale(sum(a), 1.0 / n);
  }

  /// r×c -> r×1
  Var row_sum(Var a) {
    const Mat& x = val(a);
    Mat out(x.rows(), 1);
    for (std::size_t i = 0; i < x.rows(); ++i) {
      T s(0.0);
      for (std::size_t j = 0; j < x.cols(); ++j) s += x(i, j);
      out[i] = s;
    }
    return push(OpKind::kRowSum, a.id, -1, std::move(out));
  }

  Var log_softmax_rows(Var a) {
    const Mat& x = val(a);
    Mat out(x.rows(), x.cols());
    for (std::size_t i = 0; i < x.rows(); ++i) {
      double m = value_of(x(i, 0));
      for (std::size_t j = 1; j < x.cols(); ++j) m = std::max(m, value_of(x(i, j)));
      T acc(0.0);
      for (std::size_t j = 0; j < x.cols(); ++j) {
        using std::exp;
        acc += exp(x(i, j) - T(m));
      }
      using std::log;
      const T lse = T(m) + log(acc);
      for (std::size_t j = 0; j < x.cols(); ++j) out(i, j) = x(i, j) - lse;
    }
    return push(OpKind::kLogSoftmaxRows, a.id, -1, std::move(out));
  }

  /// 1×c -> rows×c
  Var broadcast_rows(Var a, std::size_t rows) {
    const Mat& x = val(a);
    if (x.rows() != 1) throw Error(ErrorCode::kDimensionMismatch, "broadcast_rows expects a row");
    Mat out(rows, x.cols());
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < x.cols(); ++j) out(i, j) = x[j];
    return push(OpKind::kBroadcastRows, a.id, -1, std::move(out));
  }

  /// n×n -> n×1
  Var diag_part(Var a) {
    const Mat& x = val(a);
    if (!x.is_square()) throw Error(ErrorCode::kNotSquare, "diag_part");
    Mat out(x.rows(), 1);
    for (std::size_t i = 0; i < x.rows(); ++i) out[i] = x(i, i);
    return push(OpKind::kDiagPart, a.id, -1, std::move(out));
  }

  /// n-vector -> n×n diagonal
  Var diag_embed(Var a) {
    const Mat& x = val(a);
    const std::size_t n = x.size();
    Mat out(n, n);
    for (std::size_t i = 0; i < n; ++i) out(i, i) = x[i];
    return push(OpKind::kDiagEmbed, a.id, -1, std::move(out));
  }

  const Mat& value(Var v) const { return val(v); }

  double scalar(Var v) const {
    const Mat& x = val(v);
    if (x.size() != 1) throw Error(ErrorCode::kDimensionMismatch, "not a scalar node");
    return value_of(x[0]);
  }

  /// Reverse sweep from a 1×1 root. Adjoints of every node reachable from the
  /// root are accumulated; call `grad` afterwards.
  void backward(Var root) {
    if (val(root).size() != 1) {
      throw Error(ErrorCode::kDimensionMismatch, "backward needs a scalar root");
    }
    grads_.assign(nodes_.size(), Mat());
    grads_[root.id] = Mat(1, 1, T(1.0));
    for (int i = root.id; i >= 0; --i) {
      if (grads_[i].empty()) continue;
      propagate(i);
    }
  }

  /// Adjoint of a node after `backward`; zeros if unreachable.
  Mat grad(Var v) const {
    if (v.id < 0 || static_cast<std::size_t>(v.id) >= grads_.size() || grads_[v.id].empty()) {
      const Mat& x = val(v);
      return Mat(x.rows(), x.cols());
    }
    return grads_[v.id];
  }

 private:
  struct Node {
    OpKind op;
    int a = -1;
    int b = -1;
    double k0 = 0.0;
    double k1 = 0.0;
    std::size_t offset = 0;
    Mat value;
  };

  const Mat& val(Var v) const {
    if (v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size()) {
      throw Error(ErrorCode::kUnsupportedPrimitive, "variable does not belong to this tape");
    }
    return nodes_[v.id].value;
  }

  Var push(OpKind op, int a, int b, Mat value) {
    nodes_.push_back(Node{op, a, b, 0.0, 0.0, 0, std::move(value)});
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  template <class F>
  Var binary_same(OpKind op, Var a, Var b, F f) {
    const Mat& x = val(a);
    const Mat& y = val(b);
    if (!x.same_shape(y)) throw Error(ErrorCode::kDimensionMismatch, "elementwise shape mismatch");
    Mat out(x.rows(), x.cols());
    for (std::size_t k = 0; k < x.size(); ++k) out[k] = f(x[k], y[k]);
    return push(op, a.id, b.id, std::move(out));
  }

  template <class F>
  Var unary(OpKind op, Var a, F f) {
    const Mat& x = val(a);
    Mat out(x.rows(), x.cols());
    for (std::size_t k = 0; k < x.size(); ++k) out[k] = f(x[k]);
    return push(op, a.id, -1, std::move(out));
  }

  // out += op(x) * op(y), with optional transposition of either operand.
  static void gemm_acc(const Mat& x, bool tx, const Mat& y, bool ty, Mat& out) {
    const std::size_t m = tx ? x.cols() : x.rows();
    const std::size_t kk = tx ? x.rows() : x.cols();
    const std::size_t n = ty ? y.rows() : y.cols();
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t k = 0; k < kk; ++k) {
        const T& xik = tx ? x(k, i) : x(i, k);
        if (value_of(xik) == 0.0 && tangent_of(xik) == 0.0) continue;
        if (ty) {
          for (std::size_t j = 0; j < n; ++j) out(i, j) += xik * y(j, k);
        } else {
          const T* yrow = &y(k, 0);
          T* orow = &out(i, 0);
          for (std::size_t j = 0; j < n; ++j) orow[j] += xik * yrow[j];
        }
      }
    }
  }

  Mat& adj(int id) {
    if (grads_[id].empty()) {
      const Mat& x = nodes_[id].value;
      grads_[id] = Mat(x.rows(), x.cols());
    }
    return grads_[id];
  }

  void propagate(int i) {
    const Node& node = nodes_[i];
    const Mat& g = grads_[i];
    const Mat& out = node.value;
    switch (node.op) {
      case OpKind::kLeaf:
      case OpKind::kConstant:
        return;
      case OpKind::kSlice: {
        Mat& ga = adj(node.a);
        for (std::size_t k = 0; k < g.size(); ++k) ga[node.offset + k] += g[k];
        return;
      }
      case OpKind::kAdd: {
        Mat& ga = adj(node.a);
        for (std::size_t k = 0; k < g.size(); ++k) ga[k] += g[k];
        Mat& gb = adj(node.b);
        for (std::size_t k = 0; k < g.size(); ++k) gb[k] += g[k];
        return;
      }
      case OpKind::kSub: {
        Mat& ga = adj(node.a);
        for (std::size_t k = 0; k < g.size(); ++k) ga[k] += g[k];
        Mat& gb = adj(node.b);
        for (std::size_t k = 0; k < g.size(); ++k) gb[k] -= g[k];
        return;
      }
      case OpKind::kMul: {
        const Mat& x = nodes_[node.a].value;
        const Mat& y = nodes_[node.b].value;
        Mat& ga = adj(node.a);
        for (std::size_t k = 0; k < g.size(); ++k) ga[k] += g[k] * y[k];
        Mat& gb = adj(node.b);
        for (std::size_t k = 0; k < g.size(); ++k) gb[k] += g[k] * x[k];
        return;
      }
      case OpKind::kAddRow: {
        Mat& ga = adj(node.a);
        for (std::size_t k = 0; k < g.size(); ++k) ga[k] += g[k];
        Mat& gb = adj(node.b);
        for (std::size_t r = 0; r < g.rows(); ++r)
          for (std::size_t c = 0; c < g.cols(); ++c) gb[c] += g(r, c);
        return;
      }
      case OpKind::kMulRow: {
        const Mat& x = nodes_[node.a].value;
        const Mat& y = nodes_[node.b].value;
        Mat& ga = adj(node.a);
        for (std::size_t r = 0; r < g.rows(); ++r)
          for (std::size_t c = 0; c < g.cols(); ++c) ga(r, c) += g(r, c) * y[c];
        Mat& gb = adj(node.b);
        for (std::size_t r = 0; r < g.rows(); ++r)
          for (std::size_t c = 0; c < g.cols(); ++c) gb[c] += g(r, c) * x(r, c);
        return;
      }
      case OpKind::kMulCol: {
        const Mat& x = nodes_[node.a].value;
        const Mat& y = nodes_[node.b].value;
        Mat& ga = adj(node.a);
        for (std::size_t r = 0; r < g.rows(); ++r)
          for (std::size_t c = 0; c < g.cols(); ++c) ga(r, c) += g(r, c) * y[r];
        Mat& gb = adj(node.b);
        for (std::size_t r = 0; r < g.rows(); ++r)
          for (std::size_t c = 0; c < g.cols(); ++c) gb[r] += g(r, c) * x(r, c);
        return;
      }
      case OpKind::kScale: {
        Mat& ga = adj(node.a);
        for (std::size_t k = 0; k < g.size(); ++k) ga[k] += g[k] * node.k0;
        return;
      }
      case OpKind::kAddScalar: {
        Mat& ga = adj(node.a);
        for (std::size_t k = 0; k < g.size(); ++k) ga[k] += g[k];
        return;
      }
      case OpKind::kScaleBy: {
        const Mat& x = nodes_[node.a].value;
        const T s = nodes_[node.b].value[0];
        Mat& ga = adj(node.a);
        T acc(0.0);
        for (std::size_t k = 0; k < g.size(); ++k) {
          ga[k] += g[k] * s;
          acc += g[k] * x[k];
        }
        adj(node.b)[0] += acc;
        return;
      }
      case OpKind::kMatMul: {
        const Mat& x = nodes_[node.a].value;
        const Mat& y = nodes_[node.b].value;
        gemm_acc(g, false, y, true, adj(node.a));
        gemm_acc(x, true, g, false, adj(node.b));
        return;
      }
      case OpKind::kTranspose: {
        Mat& ga = adj(node.a);
        for (std::size_t r = 0; r < g.rows(); ++r)
          for (std::size_t c = 0; c < g.cols(); ++c) ga(c, r) += g(r, c);
        return;
      }
      case OpKind::kExp: {
        Mat& ga = adj(node.a);
        for (std::size_t k = 0; k < g.size(); ++k) ga[k] += g[k] * out[k];
        return;
      }
      case OpKind::kLog: {
        const Mat& x = nodes_[node.a].value;
        Mat& ga = adj(node.a);
        for (std::size_t k = 0; k < g.size(); ++k) ga[k] += g[k] / x[k];
        return;
      }
      case OpKind::kTanh: {
        Mat& ga = adj(node.a);
        for (std::size_t k = 0; k < g.size(); ++k) ga[k] += g[k] * (T(1.0) - out[k] * out[k]);
        return;
      }
      case OpKind::kRelu: {
        const Mat& x = nodes_[node.a].value;
        Mat& ga = adj(node.a);
        for (std::size_t k = 0; k < g.size(); ++k) {
          if (value_of(x[k]) > 0.0) ga[k] += g[k];
        }
        return;
      }
      case OpKind::kSquare: {
        const Mat& x = nodes_[node.a].value;
        Mat& ga = adj(node.a);
        for (std::size_t k = 0; k < g.size(); ++k) ga[k] += g[k] * x[k] * 2.0;
        return;
      }
      case OpKind::kClamp: {
        const Mat& x = nodes_[node.a].value;
        Mat& ga = adj(node.a);
        for (std::size_t k = 0; k < g.size(); ++k) {
          const double xv = value_of(x[k]);
          if (xv >= node.k0 && xv <= node.k1) ga[k] += g[k];
        }
        return;
      }
      case OpKind::kSum: {
        Mat& ga = adj(node.a);
        for (std::size_t k = 0; k < ga.size(); ++k) ga[k] += g[0];
        return;
      }
      case OpKind::kRowSum: {
        Mat& ga = adj(node.a);
        for (std::size_t r = 0; r < ga.rows(); ++r)
          for (std::size_t c = 0; c < ga.cols(); ++c) ga(r, c) += g[r];
        return;
      }
      case OpKind::kLogSoftmaxRows: {
        Mat& ga = adj(node.a);
        for (std::size_t r = 0; r < g.rows(); ++r) {
          T total(0.0);
          for (std::size_t c = 0; c < g.cols(); ++c) total += g(r, c);
          for (std::size_t c = 0; c < g.cols(); ++c) {
            using std::exp;
            ga(r, c) += g(r, c) - exp(out(r, c)) * total;
          }
        }
        return;
      }
      case OpKind::kBroadcastRows: {
        Mat& ga = adj(node.a);
        for (std::size_t r = 0; r < g.rows(); ++r)
          for (std::size_t c = 0; c < g.cols(); ++c) ga[c] += g(r, c);
        return;
      }
      case OpKind::kDiagPart: {
        Mat& ga = adj(node.a);
        for (std::size_t k = 0; k < g.size(); ++k) ga(k, k) += g[k];
        return;
      }
      case OpKind::kDiagEmbed: {
        Mat& ga = adj(node.a);
        for (std::size_t k = 0; k < ga.size(); ++k) ga[k] += g(k, k);
        return;
      }
    }
    throw Error(ErrorCode::kUnsupportedPrimitive, "unknown op on tape");
  }

  // deque keeps references returned by value() valid while nodes are appended.
  std::deque<Node> nodes_;
  std::vector<Mat> grads_;
};

}  // namespace nllpo
