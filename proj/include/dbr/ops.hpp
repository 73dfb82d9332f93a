#pragma once

#include <algorithm>
#include <vector>

#include "dbr/tape.hpp"

// Thin wrappers over the primitive set plus the handful of composites
// (guarded max, cosine, stable log-sum-exp) the model layers share.
namespace dbr::ops {

inline Tensor add(Tape* t, const Tensor& a, const Tensor& b) {
  return apply_primitive(t, Op::kAdd, {a, b});
}
inline Tensor sub(Tape* t, const Tensor& a, const Tensor& b) {
  return apply_primitive(t, Op::kSub, {a, b});
}
inline Tensor neg(Tape* t, const Tensor& a) { return apply_primitive(t, Op::kNeg, {a}); }
inline Tensor mul(Tape* t, const Tensor& a, const Tensor& b) {
  return apply_primitive(t, Op::kMul, {a, b});
}
inline Tensor div(Tape* t, const Tensor& a, const Tensor& b) {
  return apply_primitive(t, Op::kDiv, {a, b});
}
inline Tensor add_scalar(Tape* t, const Tensor& a, double c) {
  OpAttrs at;
  at.scalar = c;
  return apply_primitive(t, Op::kAddScalar, {a}, at);
}
inline Tensor mul_scalar(Tape* t, const Tensor& a, double c) {
  OpAttrs at;
  at.scalar = c;
  return apply_primitive(t, Op::kMulScalar, {a}, at);
}
inline Tensor add_row(Tape* t, const Tensor& m, const Tensor& v) {
  return apply_primitive(t, Op::kAddRow, {m, v});
}
inline Tensor mul_row(Tape* t, const Tensor& m, const Tensor& v) {
  return apply_primitive(t, Op::kMulRow, {m, v});
}
inline Tensor matmul(Tape* t, const Tensor& a, const Tensor& b) {
  return apply_primitive(t, Op::kMatMul, {a, b});
}
inline Tensor transpose(Tape* t, const Tensor& a) {
  return apply_primitive(t, Op::kTranspose, {a});
}
inline Tensor tanh(Tape* t, const Tensor& a) { return apply_primitive(t, Op::kTanh, {a}); }
inline Tensor sigmoid(Tape* t, const Tensor& a) { return apply_primitive(t, Op::kSigmoid, {a}); }
inline Tensor exp(Tape* t, const Tensor& a) { return apply_primitive(t, Op::kExp, {a}); }
inline Tensor log(Tape* t, const Tensor& a) { return apply_primitive(t, Op::kLog, {a}); }
inline Tensor sqrt(Tape* t, const Tensor& a) { return apply_primitive(t, Op::kSqrt, {a}); }
inline Tensor abs(Tape* t, const Tensor& a) { return apply_primitive(t, Op::kAbs, {a}); }
inline Tensor hinge(Tape* t, const Tensor& a) { return apply_primitive(t, Op::kHinge, {a}); }

inline Tensor softmax(Tape* t, const Tensor& a, int axis = -1) {
  OpAttrs at;
  at.axis = axis;
  return apply_primitive(t, Op::kSoftmax, {a}, at);
}
inline Tensor layer_norm(Tape* t, const Tensor& a, double eps = 1e-5) {
  OpAttrs at;
  at.eps = eps;
  return apply_primitive(t, Op::kLayerNorm, {a}, at);
}
inline Tensor concat(Tape* t, const std::vector<Tensor>& xs, int axis = 0) {
  OpAttrs at;
  at.axis = axis;
  return apply_primitive(t, Op::kConcat, xs, at);
}
inline Tensor slice(Tape* t, const Tensor& a, int axis, int start, int len) {
  OpAttrs at;
  at.axis = axis;
  at.start = start;
  at.len = len;
  return apply_primitive(t, Op::kSlice, {a}, at);
}
inline Tensor stack(Tape* t, const std::vector<Tensor>& xs) {
  return apply_primitive(t, Op::kStack, xs);
}
inline Tensor sum(Tape* t, const Tensor& a) { return apply_primitive(t, Op::kSumAll, {a}); }
inline Tensor mean(Tape* t, const Tensor& a) { return apply_primitive(t, Op::kMeanAll, {a}); }
inline Tensor sum_axis(Tape* t, const Tensor& a, int axis) {
  OpAttrs at;
  at.axis = axis;
  return apply_primitive(t, Op::kSumAxis, {a}, at);
}
inline Tensor mean_axis(Tape* t, const Tensor& a, int axis) {
  OpAttrs at;
  at.axis = axis;
  return apply_primitive(t, Op::kMeanAxis, {a}, at);
}
inline Tensor l2_norm(Tape* t, const Tensor& a) { return apply_primitive(t, Op::kL2Norm, {a}); }
inline Tensor conv1d_causal(Tape* t, const Tensor& x, const Tensor& w) {
  return apply_primitive(t, Op::kConv1dCausal, {x, w});
}
inline Tensor reshape(Tape* t, const Tensor& a, Shape s) {
  OpAttrs at;
  at.shape = std::move(s);
  return apply_primitive(t, Op::kReshape, {a}, at);
}

inline Tensor as_row(Tape* t, const Tensor& v) {
  return reshape(t, v, Shape{1, static_cast<int>(v.numel())});
}
inline Tensor as_col(Tape* t, const Tensor& v) {
  return reshape(t, v, Shape{static_cast<int>(v.numel()), 1});
}
inline Tensor flatten(Tape* t, const Tensor& v) {
  return reshape(t, v, Shape{static_cast<int>(v.numel())});
}

// ---- composites ----

inline Tensor dot(Tape* t, const Tensor& a, const Tensor& b) { return sum(t, mul(t, a, b)); }

inline Tensor square(Tape* t, const Tensor& a) { return mul(t, a, a); }

// max(x, c) elementwise against a constant, via the hinge
inline Tensor max_with(Tape* t, const Tensor& a, double c) {
  return add_scalar(t, hinge(t, add_scalar(t, a, -c)), c);
}

// x W + b for a [r,d] matrix (row-vector convention)
inline Tensor linear(Tape* t, const Tensor& x, const Tensor& w, const Tensor& b) {
  return add_row(t, matmul(t, x, w), b);
}

// 1-d vector through the same projection
inline Tensor linear_vec(Tape* t, const Tensor& x, const Tensor& w, const Tensor& b) {
  return flatten(t, add_row(t, matmul(t, as_row(t, x), w), b));
}

// LayerNorm followed by a learned gain/bias over the last axis
inline Tensor layer_norm_affine(Tape* t, const Tensor& x, const Tensor& gain, const Tensor& bias,
                                double eps = 1e-5) {
  Tensor normed = layer_norm(t, x, eps);
  if (x.rank() == 2) return add_row(t, mul_row(t, normed, gain), bias);
  return add(t, mul(t, normed, gain), bias);
}

// mean over time of a [T,d] matrix -> [d]
inline Tensor mean_rows(Tape* t, const Tensor& x) { return mean_axis(t, x, 0); }

// ||a||_2 guarded away from zero
inline Tensor norm_guarded(Tape* t, const Tensor& a, double eps = 1e-8) {
  return max_with(t, l2_norm(t, a), eps);
}

inline Tensor cosine_similarity(Tape* t, const Tensor& a, const Tensor& b, double eps = 1e-8) {
  Tensor denom = mul(t, norm_guarded(t, a, eps), norm_guarded(t, b, eps));
  return div(t, dot(t, a, b), denom);
}

// log(sum(exp(x))) for a 1-d vector; the running max is folded in as a
// constant, which leaves the exact same value and gradient.
inline Tensor log_sum_exp(Tape* t, const Tensor& x) {
  double mx = x.data()[0];
  for (std::size_t i = 1; i < x.numel(); ++i) mx = std::max(mx, x.data()[i]);
  Tensor shifted = add_scalar(t, x, -mx);
  return add_scalar(t, log(t, sum(t, exp(t, shifted))), mx);
}

// one hidden layer with tanh: x -> act(x W1 + b1) W2 + b2, 1-d in/out
inline Tensor mlp2_vec(Tape* t, const Tensor& x, const Tensor& w1, const Tensor& b1,
                       const Tensor& w2, const Tensor& b2) {
  Tensor h = tanh(t, linear_vec(t, x, w1, b1));
  return linear_vec(t, h, w2, b2);
}

}  // namespace dbr::ops
