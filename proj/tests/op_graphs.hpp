#pragma once

#include "nllpo/tape.hpp"

namespace nllpo::testing {

// Every primitive on one small graph each; all reduce to a scalar. Inputs are
// a 12-vector viewed as matrices of several shapes.
template <class T>
Var op_graph(Tape<T>& t, Var p, int which) {
  const Var a = t.slice(p, 0, 3, 2);
  const Var b = t.slice(p, 6, 2, 3);
  const Var r = t.slice(p, 6, 1, 2);
  const Var c = t.slice(p, 8, 3, 1);
  const Var s = t.slice(p, 11, 1, 1);
  const Var sq = t.slice(p, 0, 2, 2);
  switch (which) {
    case 0: return t.sum(t.add(a, t.transpose(b)));
    case 1: return t.sum(t.square(t.sub(a, t.transpose(b))));
    case 2: return t.sum(t.mul(a, t.transpose(b)));
    case 3: return t.sum(t.square(t.add_row(a, r)));
    case 4: return t.sum(t.square(t.mul_row(a, r)));
    case 5: return t.sum(t.square(t.mul_col(a, c)));
    case 6: return t.sum(t.square(t.scale(a, -2.5)));
    case 7: return t.sum(t.square(t.add_scalar(a, 0.7)));
    case 8: return t.sum(t.square(t.scale_by(a, s)));
    case 9: return t.sum(t.square(t.matmul(a, b)));
    case 10: return t.sum(t.exp(a));
    case 11: return t.sum(t.log(t.exp(a)));
    case 12: return t.sum(t.mul(t.log(t.add_scalar(t.square(a), 1.0)), t.transpose(b)));
    case 13: return t.sum(t.mul(t.tanh(a), t.transpose(b)));
    case 14: return t.sum(t.mul(t.relu(a), t.transpose(b)));
    case 15: return t.sum(t.mul(t.clamp(a, -0.5, 0.5), t.transpose(b)));
    case 16: return t.mean(t.square(a));
    case 17: return t.sum(t.square(t.row_sum(a)));
    case 18: return t.sum(t.mul(t.log_softmax_rows(a), t.transpose(b)));
    case 19: return t.sum(t.square(t.broadcast_rows(r, 4)));
    case 20: return t.sum(t.square(t.diag_part(t.matmul(sq, sq))));
    case 21: return t.sum(t.square(t.matmul(t.diag_embed(c), a)));
    case 22: return t.sum(t.square(t.neg(t.sub(t.constant(Matrix(3, 2, 1.5)), a))));
    default: return t.sum(a);
  }
}

inline constexpr int kOps = 23;

}  // namespace nllpo::testing
