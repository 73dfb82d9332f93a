#pragma once

#include <array>
#include <cmath>
#include <cstring>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "dbr/tensor.hpp"

namespace dbr {

enum class Op {
  kLeaf,
  kAdd,
  kSub,
  kNeg,
  kMul,
  kDiv,
  kAddScalar,
  kMulScalar,
  kAddRow,
  kMulRow,
  kMatMul,
  kTranspose,
  kTanh,
  kSigmoid,
  kExp,
  kLog,
  kSqrt,
  kAbs,
  kHinge,
  kSoftmax,
  kLayerNorm,
  kConcat,
  kSlice,
  kStack,
  kSumAll,
  kMeanAll,
  kSumAxis,
  kMeanAxis,
  kL2Norm,
  kConv1dCausal,
  kReshape,
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::kLeaf: return "leaf";
    case Op::kAdd: return "add";
    case Op::kSub: return "sub";
    case Op::kNeg: return "neg";
    case Op::kMul: return "mul";
    case Op::kDiv: return "div";
    case Op::kAddScalar: return "add_scalar";
    case Op::kMulScalar: return "mul_scalar";
    case Op::kAddRow: return "add_row";
    case Op::kMulRow: return "mul_row";
    case Op::kMatMul: return "matmul";
    case Op::kTranspose: return "transpose";
    case Op::kTanh: return "tanh";
    case Op::kSigmoid: return "sigmoid";
    case Op::kExp: return "exp";
    case Op::kLog: return "log";
    case Op::kSqrt: return "sqrt";
    case Op::kAbs: return "abs";
    case Op::kHinge: return "hinge";
    case Op::kSoftmax: return "softmax";
    case Op::kLayerNorm: return "layer_norm";
    case Op::kConcat: return "concat";
    case Op::kSlice: return "slice";
    case Op::kStack: return "stack";
    case Op::kSumAll: return "sum";
    case Op::kMeanAll: return "mean";
    case Op::kSumAxis: return "sum_axis";
    case Op::kMeanAxis: return "mean_axis";
    case Op::kL2Norm: return "l2_norm";
    case Op::kConv1dCausal: return "conv1d_causal";
    case Op::kReshape: return "reshape";
  }
  return "?";
}

struct OpAttrs {
  double scalar = 0.0;
  int axis = -1;
  int start = 0;
  int len = 0;
  double eps = 0.0;
  Shape shape;  // kReshape target
};

// Reverse-mode tape. Nodes are appended in forward order, so the node list is
// already a topological order and backward is a single reverse sweep.
class Tape {
 public:
  struct Node {
    Op op;
    OpAttrs attrs;
    std::vector<int> in_ids;      // node id per input, -1 when untracked
    std::vector<Tensor> in_vals;  // forward values (buffer handles)
    Tensor out;
  };

  std::vector<Node> nodes;

  // Test instrumentation: corrupt the backward rule of one primitive so the
  // finite-difference harness can prove it detects a wrong rule.
  Op fault_op = Op::kLeaf;
  double fault_scale = 2.0;

  void clear() { nodes.clear(); }

  int leaf(Tensor& t) {
    t.requires_grad = true;
    Node n;
    n.op = Op::kLeaf;
    n.out = t;
    nodes.push_back(std::move(n));
    t.node = static_cast<int>(nodes.size()) - 1;
    nodes.back().out.node = t.node;
    return t.node;
  }
};

namespace detail {

inline void throw_shape(Op op, const std::string& why) {
  throw std::invalid_argument(std::string(op_name(op)) + ": " + why);
}

inline void check_finite_out(Op op, const Tensor& t) {
  if (!all_finite(t))
    throw std::runtime_error(std::string("non-finite value in forward result of ") + op_name(op));
}

inline void matmul_accum(const double* a, const double* b, double* c, int r, int k, int cdim) {
  // c[r,cdim] += a[r,k] * b[k,cdim]
  for (int i = 0; i < r; ++i) {
    const double* ai = a + static_cast<std::size_t>(i) * k;
    double* ci = c + static_cast<std::size_t>(i) * cdim;
    for (int p = 0; p < k; ++p) {
      double av = ai[p];
      if (av == 0.0) continue;
      const double* bp = b + static_cast<std::size_t>(p) * cdim;
      for (int j = 0; j < cdim; ++j) ci[j] += av * bp[j];
    }
  }
}

// Iteration sizes for softmax along `axis` of a 1-d or 2-d tensor: the tensor
// is viewed as `outer` groups of `len` entries with stride `stride`.
struct AxisView {
  int outer;
  int len;
  int stride;
  int group_step;
};

inline AxisView axis_view(Op op, const Tensor& x, int axis) {
  if (x.rank() == 1) {
    if (axis != 0) throw_shape(op, "axis out of range for 1-d tensor");
    return {1, x.shape[0], 1, 0};
  }
  if (x.rank() == 2) {
    if (axis == 1) return {x.shape[0], x.shape[1], 1, x.shape[1]};
    if (axis == 0) return {x.shape[1], x.shape[0], x.shape[1], 1};
    throw_shape(op, "axis out of range for 2-d tensor");
  }
  throw_shape(op, "rank > 2 not supported");
  return {};
}

}  // namespace detail

// Forward evaluation of one primitive; records a tape node when `tape` is
// given and any input is tracked. Inputs are never mutated.
inline Tensor apply_primitive(Tape* tape, Op op, const std::vector<Tensor>& ins,
                              const OpAttrs& attrs = {}) {
  using detail::throw_shape;
  Tensor out;

  auto need = [&](std::size_t n) {
    if (ins.size() != n) throw_shape(op, "expected " + std::to_string(n) + " inputs");
  };

  switch (op) {
    case Op::kLeaf:
      throw std::invalid_argument("leaf is not applicable as a primitive");

    case Op::kAdd:
    case Op::kSub:
    case Op::kMul:
    case Op::kDiv: {
      need(2);
      if (!same_shape(ins[0], ins[1]))
        throw_shape(op, "shape mismatch " + shape_str(ins[0].shape) + " vs " + shape_str(ins[1].shape));
      out = Tensor(ins[0].shape);
      const double* a = ins[0].data();
      const double* b = ins[1].data();
      double* o = out.data();
      std::size_t n = out.numel();
      if (op == Op::kAdd)
        for (std::size_t i = 0; i < n; ++i) o[i] = a[i] + b[i];
      else if (op == Op::kSub)
        for (std::size_t i = 0; i < n; ++i) o[i] = a[i] - b[i];
      else if (op == Op::kMul)
        for (std::size_t i = 0; i < n; ++i) o[i] = a[i] * b[i];
      else
        for (std::size_t i = 0; i < n; ++i) o[i] = a[i] / b[i];
      break;
    }

    case Op::kNeg:
    case Op::kTanh:
    case Op::kSigmoid:
    case Op::kExp:
    case Op::kLog:
    case Op::kSqrt:
    case Op::kAbs:
    case Op::kHinge: {
      need(1);
      out = Tensor(ins[0].shape);
      const double* a = ins[0].data();
      double* o = out.data();
      std::size_t n = out.numel();
      switch (op) {
        case Op::kNeg:
          for (std::size_t i = 0; i < n; ++i) o[i] = -a[i];
          break;
        case Op::kTanh:
          for (std::size_t i = 0; i < n; ++i) o[i] = std::tanh(a[i]);
          break;
        case Op::kSigmoid:
          for (std::size_t i = 0; i < n; ++i) o[i] = 1.0 / (1.0 + std::exp(-a[i]));
          break;
        case Op::kExp:
          for (std::size_t i = 0; i < n; ++i) o[i] = std::exp(a[i]);
          break;
        case Op::kLog:
          for (std::size_t i = 0; i < n; ++i) o[i] = std::log(a[i]);
          break;
        case Op::kSqrt:
          for (std::size_t i = 0; i < n; ++i) o[i] = std::sqrt(a[i]);
          break;
        case Op::kAbs:
          for (std::size_t i = 0; i < n; ++i) o[i] = std::fabs(a[i]);
          break;
        default:  // kHinge
          for (std::size_t i = 0; i < n; ++i) o[i] = a[i] > 0.0 ? a[i] : 0.0;
          break;
      }
      break;
    }

    case Op::kAddScalar:
    case Op::kMulScalar: {
      need(1);
      out = Tensor(ins[0].shape);
      const double* a = ins[0].data();
      double* o = out.data();
      std::size_t n = out.numel();
      double c = attrs.scalar;
      if (op == Op::kAddScalar)
        for (std::size_t i = 0; i < n; ++i) o[i] = a[i] + c;
      else
        for (std::size_t i = 0; i < n; ++i) o[i] = a[i] * c;
      break;
    }

    case Op::kAddRow:
    case Op::kMulRow: {
      need(2);
      if (ins[0].rank() != 2 || ins[1].rank() != 1 || ins[0].shape[1] != ins[1].shape[0])
        throw_shape(op, "expected [r,c] matrix and [c] vector, got " + shape_str(ins[0].shape) +
                            " and " + shape_str(ins[1].shape));
      out = Tensor(ins[0].shape);
      int r = ins[0].shape[0], c = ins[0].shape[1];
      const double* m = ins[0].data();
      const double* v = ins[1].data();
      double* o = out.data();
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) {
          std::size_t idx = static_cast<std::size_t>(i) * c + j;
          o[idx] = op == Op::kAddRow ? m[idx] + v[j] : m[idx] * v[j];
        }
      break;
    }

    case Op::kMatMul: {
      need(2);
      if (ins[0].rank() != 2 || ins[1].rank() != 2 || ins[0].shape[1] != ins[1].shape[0])
        throw_shape(op, "incompatible shapes " + shape_str(ins[0].shape) + " x " +
                            shape_str(ins[1].shape));
      int r = ins[0].shape[0], k = ins[0].shape[1], c = ins[1].shape[1];
      out = Tensor(Shape{r, c});
      detail::matmul_accum(ins[0].data(), ins[1].data(), out.data(), r, k, c);
      break;
    }

    case Op::kTranspose: {
      need(1);
      if (ins[0].rank() != 2) throw_shape(op, "expected 2-d tensor");
      int r = ins[0].shape[0], c = ins[0].shape[1];
      out = Tensor(Shape{c, r});
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) out.at(j, i) = ins[0].at(i, j);
      break;
    }

    case Op::kSoftmax: {
      need(1);
      auto view = detail::axis_view(op, ins[0], attrs.axis < 0 ? ins[0].rank() - 1 : attrs.axis);
      out = Tensor(ins[0].shape);
      const double* a = ins[0].data();
      double* o = out.data();
      for (int g = 0; g < view.outer; ++g) {
        const double* xg = a + static_cast<std::size_t>(g) * view.group_step;
        double* og = o + static_cast<std::size_t>(g) * view.group_step;
        double mx = xg[0];
        for (int i = 1; i < view.len; ++i) mx = std::max(mx, xg[static_cast<std::size_t>(i) * view.stride]);
        double z = 0.0;
        for (int i = 0; i < view.len; ++i) {
          double e = std::exp(xg[static_cast<std::size_t>(i) * view.stride] - mx);
          og[static_cast<std::size_t>(i) * view.stride] = e;
          z += e;
        }
        for (int i = 0; i < view.len; ++i) og[static_cast<std::size_t>(i) * view.stride] /= z;
      }
      break;
    }

    case Op::kLayerNorm: {
      need(1);
      if (ins[0].rank() < 1 || ins[0].rank() > 2) throw_shape(op, "expected 1-d or 2-d tensor");
      int len = ins[0].shape.back();
      int rows = ins[0].rank() == 2 ? ins[0].shape[0] : 1;
      double eps = attrs.eps > 0 ? attrs.eps : 1e-5;
      out = Tensor(ins[0].shape);
      const double* a = ins[0].data();
      double* o = out.data();
      for (int i = 0; i < rows; ++i) {
        const double* x = a + static_cast<std::size_t>(i) * len;
        double* y = o + static_cast<std::size_t>(i) * len;
        double mu = 0.0;
        for (int j = 0; j < len; ++j) mu += x[j];
        mu /= len;
        double var = 0.0;
        for (int j = 0; j < len; ++j) var += (x[j] - mu) * (x[j] - mu);
        var /= len;
        double inv = 1.0 / std::sqrt(var + eps);
        for (int j = 0; j < len; ++j) y[j] = (x[j] - mu) * inv;
      }
      break;
    }

    case Op::kConcat: {
      if (ins.empty()) throw_shape(op, "no inputs");
      int axis = attrs.axis < 0 ? 0 : attrs.axis;
      int rank = ins[0].rank();
      if (axis >= rank) throw_shape(op, "axis out of range");
      Shape s = ins[0].shape;
      int total = 0;
      for (const Tensor& t : ins) {
        if (t.rank() != rank) throw_shape(op, "rank mismatch across inputs");
        for (int d = 0; d < rank; ++d)
          if (d != axis && t.shape[d] != s[d]) throw_shape(op, "extent mismatch across inputs");
        total += t.shape[axis];
      }
      s[axis] = total;
      out = Tensor(s);
      if (rank == 1 || axis == 0) {
        double* o = out.data();
        for (const Tensor& t : ins) {
          std::memcpy(o, t.data(), t.numel() * sizeof(double));
          o += t.numel();
        }
      } else {  // rank 2, axis 1
        int r = s[0];
        int off = 0;
        for (const Tensor& t : ins) {
          int c = t.shape[1];
          for (int i = 0; i < r; ++i)
            std::memcpy(out.data() + static_cast<std::size_t>(i) * s[1] + off,
                        t.data() + static_cast<std::size_t>(i) * c, c * sizeof(double));
          off += c;
        }
      }
      break;
    }

    case Op::kSlice: {
      need(1);
      int axis = attrs.axis < 0 ? 0 : attrs.axis;
      if (axis >= ins[0].rank()) throw_shape(op, "axis out of range");
      int extent = ins[0].shape[axis];
      if (attrs.start < 0 || attrs.len <= 0 || attrs.start + attrs.len > extent)
        throw_shape(op, "slice [" + std::to_string(attrs.start) + "," +
                            std::to_string(attrs.start + attrs.len) + ") out of range for extent " +
                            std::to_string(extent));
      Shape s = ins[0].shape;
      s[axis] = attrs.len;
      out = Tensor(s);
      if (ins[0].rank() == 1 || axis == 0) {
        std::size_t row = 1;
        for (int d = 1; d < ins[0].rank(); ++d) row *= ins[0].shape[d];
        std::memcpy(out.data(), ins[0].data() + static_cast<std::size_t>(attrs.start) * row,
                    out.numel() * sizeof(double));
      } else {  // rank 2, axis 1
        int r = ins[0].shape[0], c = ins[0].shape[1];
        for (int i = 0; i < r; ++i)
          std::memcpy(out.data() + static_cast<std::size_t>(i) * attrs.len,
                      ins[0].data() + static_cast<std::size_t>(i) * c + attrs.start,
                      attrs.len * sizeof(double));
      }
      break;
    }

    case Op::kStack: {
      if (ins.empty()) throw_shape(op, "no inputs");
      for (const Tensor& t : ins)
        if (t.shape != ins[0].shape) throw_shape(op, "inputs must share a shape");
      Shape s;
      s.push_back(static_cast<int>(ins.size()));
      for (int e : ins[0].shape) s.push_back(e);
      out = Tensor(s);
      double* o = out.data();
      for (const Tensor& t : ins) {
        std::memcpy(o, t.data(), t.numel() * sizeof(double));
        o += t.numel();
      }
      break;
    }

    case Op::kSumAll:
    case Op::kMeanAll: {
      need(1);
      double acc = 0.0;
      for (std::size_t i = 0; i < ins[0].numel(); ++i) acc += ins[0].data()[i];
      if (op == Op::kMeanAll) acc /= static_cast<double>(ins[0].numel());
      out = Tensor::scalar(acc);
      break;
    }

    case Op::kSumAxis:
    case Op::kMeanAxis: {
      need(1);
      if (ins[0].rank() != 2) throw_shape(op, "expected 2-d tensor");
      int r = ins[0].shape[0], c = ins[0].shape[1];
      int axis = attrs.axis;
      if (axis != 0 && axis != 1) throw_shape(op, "axis must be 0 or 1");
      out = Tensor(Shape{axis == 0 ? c : r});
      double* o = out.data();
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) o[axis == 0 ? j : i] += ins[0].at(i, j);
      if (op == Op::kMeanAxis) {
        double denom = axis == 0 ? r : c;
        for (std::size_t i = 0; i < out.numel(); ++i) o[i] /= denom;
      }
      break;
    }

    case Op::kL2Norm: {
      need(1);
      double acc = 0.0;
      for (std::size_t i = 0; i < ins[0].numel(); ++i) acc += ins[0].data()[i] * ins[0].data()[i];
      out = Tensor::scalar(std::sqrt(acc));
      break;
    }

    case Op::kConv1dCausal: {
      need(2);
      // x: [T, Cin], w: [K, Cin, Cout]; zero left padding keeps the length.
      if (ins[0].rank() != 2 || ins[1].rank() != 3 || ins[1].shape[1] != ins[0].shape[1])
        throw_shape(op, "expected x [T,Cin] and w [K,Cin,Cout], got " + shape_str(ins[0].shape) +
                            " and " + shape_str(ins[1].shape));
      int T = ins[0].shape[0], ci = ins[0].shape[1];
      int K = ins[1].shape[0], co = ins[1].shape[2];
      out = Tensor(Shape{T, co});
      const double* x = ins[0].data();
      const double* w = ins[1].data();
      double* o = out.data();
      for (int t = 0; t < T; ++t)
        for (int k = 0; k < K; ++k) {
          int src = t - k;
          if (src < 0) continue;
          const double* xr = x + static_cast<std::size_t>(src) * ci;
          const double* wk = w + static_cast<std::size_t>(k) * ci * co;
          double* ot = o + static_cast<std::size_t>(t) * co;
          for (int i = 0; i < ci; ++i) {
            double xv = xr[i];
            if (xv == 0.0) continue;
            const double* wi = wk + static_cast<std::size_t>(i) * co;
            for (int j = 0; j < co; ++j) ot[j] += xv * wi[j];
          }
        }
      break;
    }

    case Op::kReshape: {
      need(1);
      if (shape_numel(attrs.shape) != ins[0].numel())
        throw_shape(op, "element count mismatch reshaping " + shape_str(ins[0].shape) + " to " +
                            shape_str(attrs.shape));
      out = Tensor(attrs.shape);
      std::memcpy(out.data(), ins[0].data(), out.numel() * sizeof(double));
      break;
    }
  }

  detail::check_finite_out(op, out);

  bool tracked = false;
  if (tape)
    for (const Tensor& t : ins)
      if (t.node >= 0) tracked = true;
  if (tracked) {
    Tape::Node n;
    n.op = op;
    n.attrs = attrs;
    n.in_ids.reserve(ins.size());
    n.in_vals.reserve(ins.size());
    for (const Tensor& t : ins) {
      n.in_ids.push_back(t.node);
      n.in_vals.push_back(t);
    }
    n.out = out;
    tape->nodes.push_back(std::move(n));
    out.node = static_cast<int>(tape->nodes.size()) - 1;
    tape->nodes.back().out.node = out.node;
  }
  return out;
}

// Reverse sweep. Returns one gradient slot per tape node (undefined Tensor
// where nothing flowed). Every requires_grad leaf reachable from the loss
// ends up with a defined, finite gradient.
inline std::vector<Tensor> backward(Tape& tape, const Tensor& loss) {
  if (tape.nodes.empty()) throw std::invalid_argument("backward: empty tape");
  if (!loss.is_scalar()) throw std::invalid_argument("backward: loss must be scalar");
  if (loss.node < 0) throw std::invalid_argument("backward: loss is not on the tape");

  std::vector<Tensor> grad(tape.nodes.size());
  auto slot = [&](int id, const Shape& s) -> Tensor& {
    if (!grad[id].defined()) grad[id] = Tensor(s);
    return grad[id];
  };

  grad[loss.node] = Tensor::full(loss.shape, 1.0);

  for (int id = loss.node; id >= 0; --id) {
    if (!grad[id].defined()) continue;
    const Tape::Node& n = tape.nodes[id];
    if (n.op == Op::kLeaf) continue;
    const Tensor& g = grad[id];

    double fs = (tape.fault_op == n.op) ? tape.fault_scale : 1.0;
    auto tracked = [&](std::size_t i) { return n.in_ids[i] >= 0; };

    switch (n.op) {
      case Op::kLeaf:
        break;

      case Op::kAdd:
      case Op::kSub: {
        double sign = n.op == Op::kAdd ? 1.0 : -1.0;
        if (tracked(0)) {
          double* d = slot(n.in_ids[0], n.in_vals[0].shape).data();
          for (std::size_t i = 0; i < g.numel(); ++i) d[i] += fs * g.data()[i];
        }
        if (tracked(1)) {
          double* d = slot(n.in_ids[1], n.in_vals[1].shape).data();
          for (std::size_t i = 0; i < g.numel(); ++i) d[i] += fs * sign * g.data()[i];
        }
        break;
      }

      case Op::kNeg: {
        if (tracked(0)) {
          double* d = slot(n.in_ids[0], n.in_vals[0].shape).data();
          for (std::size_t i = 0; i < g.numel(); ++i) d[i] -= fs * g.data()[i];
        }
        break;
      }

      case Op::kMul: {
        const double* a = n.in_vals[0].data();
        const double* b = n.in_vals[1].data();
        if (tracked(0)) {
          double* d = slot(n.in_ids[0], n.in_vals[0].shape).data();
          for (std::size_t i = 0; i < g.numel(); ++i) d[i] += fs * g.data()[i] * b[i];
        }
        if (tracked(1)) {
          double* d = slot(n.in_ids[1], n.in_vals[1].shape).data();
          for (std::size_t i = 0; i < g.numel(); ++i) d[i] += fs * g.data()[i] * a[i];
        }
        break;
      }

      case Op::kDiv: {
        const double* a = n.in_vals[0].data();
        const double* b = n.in_vals[1].data();
        if (tracked(0)) {
          double* d = slot(n.in_ids[0], n.in_vals[0].shape).data();
          for (std::size_t i = 0; i < g.numel(); ++i) d[i] += fs * g.data()[i] / b[i];
        }
        if (tracked(1)) {
          double* d = slot(n.in_ids[1], n.in_vals[1].shape).data();
          for (std::size_t i = 0; i < g.numel(); ++i)
            d[i] -= fs * g.data()[i] * a[i] / (b[i] * b[i]);
        }
        break;
      }

      case Op::kAddScalar: {
        if (tracked(0)) {
          double* d = slot(n.in_ids[0], n.in_vals[0].shape).data();
          for (std::size_t i = 0; i < g.numel(); ++i) d[i] += fs * g.data()[i];
        }
        break;
      }

      case Op::kMulScalar: {
        if (tracked(0)) {
          double* d = slot(n.in_ids[0], n.in_vals[0].shape).data();
          for (std::size_t i = 0; i < g.numel(); ++i) d[i] += fs * n.attrs.scalar * g.data()[i];
        }
        break;
      }

      case Op::kAddRow: {
        int r = n.in_vals[0].shape[0], c = n.in_vals[0].shape[1];
        if (tracked(0)) {
          double* d = slot(n.in_ids[0], n.in_vals[0].shape).data();
          for (std::size_t i = 0; i < g.numel(); ++i) d[i] += fs * g.data()[i];
        }
        if (tracked(1)) {
          double* d = slot(n.in_ids[1], n.in_vals[1].shape).data();
          for (int i = 0; i < r; ++i)
            for (int j = 0; j < c; ++j) d[j] += fs * g.data()[static_cast<std::size_t>(i) * c + j];
        }
        break;
      }

      case Op::kMulRow: {
        int r = n.in_vals[0].shape[0], c = n.in_vals[0].shape[1];
        const double* m = n.in_vals[0].data();
        const double* v = n.in_vals[1].data();
        if (tracked(0)) {
          double* d = slot(n.in_ids[0], n.in_vals[0].shape).data();
          for (int i = 0; i < r; ++i)
            for (int j = 0; j < c; ++j) {
              std::size_t idx = static_cast<std::size_t>(i) * c + j;
              d[idx] += fs * g.data()[idx] * v[j];
            }
        }
        if (tracked(1)) {
          double* d = slot(n.in_ids[1], n.in_vals[1].shape).data();
          for (int i = 0; i < r; ++i)
            for (int j = 0; j < c; ++j) {
              std::size_t idx = static_cast<std::size_t>(i) * c + j;
              d[j] += fs * g.data()[idx] * m[idx];
            }
        }
        break;
      }

      case Op::kMatMul: {
        const Tensor& A = n.in_vals[0];
        const Tensor& B = n.in_vals[1];
        int r = A.shape[0], k = A.shape[1], c = B.shape[1];
        if (tracked(0)) {
          // dA += g * B^T
          double* d = slot(n.in_ids[0], A.shape).data();
          for (int i = 0; i < r; ++i)
            for (int p = 0; p < k; ++p) {
              double acc = 0.0;
              const double* gi = g.data() + static_cast<std::size_t>(i) * c;
              const double* bp = B.data() + static_cast<std::size_t>(p) * c;
              for (int j = 0; j < c; ++j) acc += gi[j] * bp[j];
              d[static_cast<std::size_t>(i) * k + p] += fs * acc;
            }
        }
        if (tracked(1)) {
          // dB += A^T * g
          double* d = slot(n.in_ids[1], B.shape).data();
          for (int i = 0; i < r; ++i) {
            const double* ai = A.data() + static_cast<std::size_t>(i) * k;
            const double* gi = g.data() + static_cast<std::size_t>(i) * c;
            for (int p = 0; p < k; ++p) {
              double av = fs * ai[p];
              if (av == 0.0) continue;
              double* dp = d + static_cast<std::size_t>(p) * c;
              for (int j = 0; j < c; ++j) dp[j] += av * gi[j];
            }
          }
        }
        break;
      }

      case Op::kTranspose: {
        if (tracked(0)) {
          int r = n.in_vals[0].shape[0], c = n.in_vals[0].shape[1];
          double* d = slot(n.in_ids[0], n.in_vals[0].shape).data();
          for (int i = 0; i < r; ++i)
            for (int j = 0; j < c; ++j) d[static_cast<std::size_t>(i) * c + j] += fs * g.at(j, i);
        }
        break;
      }

      case Op::kTanh: {
        if (tracked(0)) {
          double* d = slot(n.in_ids[0], n.in_vals[0].shape).data();
          const double* y = n.out.data();
          for (std::size_t i = 0; i < g.numel(); ++i) d[i] += fs * g.data()[i] * (1.0 - y[i] * y[i]);
        }
        break;
      }

      case Op::kSigmoid: {
        if (tracked(0)) {
          double* d = slot(n.in_ids[0], n.in_vals[0].shape).data();
          const double* y = n.out.data();
          for (std::size_t i = 0; i < g.numel(); ++i) d[i] += fs * g.data()[i] * y[i] * (1.0 - y[i]);
        }
        break;
      }

      case Op::kExp: {
        if (tracked(0)) {
          double* d = slot(n.in_ids[0], n.in_vals[0].shape).data();
          const double* y = n.out.data();
          for (std::size_t i = 0; i < g.numel(); ++i) d[i] += fs * g.data()[i] * y[i];
        }
        break;
      }

      case Op::kLog: {
        if (tracked(0)) {
          double* d = slot(n.in_ids[0], n.in_vals[0].shape).data();
          const double* x = n.in_vals[0].data();
          for (std::size_t i = 0; i < g.numel(); ++i) d[i] += fs * g.data()[i] / x[i];
        }
        break;
      }

      case Op::kSqrt: {
        if (tracked(0)) {
          double* d = slot(n.in_ids[0], n.in_vals[0].shape).data();
          const double* y = n.out.data();
          for (std::size_t i = 0; i < g.numel(); ++i) d[i] += fs * g.data()[i] * 0.5 / y[i];
        }
        break;
      }

      case Op::kAbs: {
        if (tracked(0)) {
          double* d = slot(n.in_ids[0], n.in_vals[0].shape).data();
          const double* x = n.in_vals[0].data();
          for (std::size_t i = 0; i < g.numel(); ++i) {
            double s = x[i] > 0.0 ? 1.0 : (x[i] < 0.0 ? -1.0 : 0.0);
            d[i] += fs * g.data()[i] * s;
          }
        }
        break;
      }

      case Op::kHinge: {
        // subgradient 0 at the kink
        if (tracked(0)) {
          double* d = slot(n.in_ids[0], n.in_vals[0].shape).data();
          const double* x = n.in_vals[0].data();
          for (std::size_t i = 0; i < g.numel(); ++i)
            if (x[i] > 0.0) d[i] += fs * g.data()[i];
        }
        break;
      }

      case Op::kSoftmax: {
        if (tracked(0)) {
          auto view = detail::axis_view(n.op, n.in_vals[0],
                                        n.attrs.axis < 0 ? n.in_vals[0].rank() - 1 : n.attrs.axis);
          double* d = slot(n.in_ids[0], n.in_vals[0].shape).data();
          const double* y = n.out.data();
          for (int grp = 0; grp < view.outer; ++grp) {
            std::size_t base = static_cast<std::size_t>(grp) * view.group_step;
            double dot = 0.0;
            for (int i = 0; i < view.len; ++i) {
              std::size_t idx = base + static_cast<std::size_t>(i) * view.stride;
              dot += g.data()[idx] * y[idx];
            }
            for (int i = 0; i < view.len; ++i) {
              std::size_t idx = base + static_cast<std::size_t>(i) * view.stride;
              d[idx] += fs * (g.data()[idx] - dot) * y[idx];
            }
          }
        }
        break;
      }

      case Op::kLayerNorm: {
        if (tracked(0)) {
          int len = n.in_vals[0].shape.back();
          int rows = n.in_vals[0].rank() == 2 ? n.in_vals[0].shape[0] : 1;
          double eps = n.attrs.eps > 0 ? n.attrs.eps : 1e-5;
          double* d = slot(n.in_ids[0], n.in_vals[0].shape).data();
          const double* x = n.in_vals[0].data();
          for (int i = 0; i < rows; ++i) {
            const double* xr = x + static_cast<std::size_t>(i) * len;
            const double* gr = g.data() + static_cast<std::size_t>(i) * len;
            double* dr = d + static_cast<std::size_t>(i) * len;
            double mu = 0.0;
            for (int j = 0; j < len; ++j) mu += xr[j];
            mu /= len;
            double var = 0.0;
            for (int j = 0; j < len; ++j) var += (xr[j] - mu) * (xr[j] - mu);
            var /= len;
            double inv = 1.0 / std::sqrt(var + eps);
            double gmean = 0.0, gxhat = 0.0;
            for (int j = 0; j < len; ++j) {
              double xh = (xr[j] - mu) * inv;
              gmean += gr[j];
              gxhat += gr[j] * xh;
            }
            gmean /= len;
            gxhat /= len;
            for (int j = 0; j < len; ++j) {
              double xh = (xr[j] - mu) * inv;
              dr[j] += fs * inv * (gr[j] - gmean - xh * gxhat);
            }
          }
        }
        break;
      }

      case Op::kConcat: {
        int axis = n.attrs.axis < 0 ? 0 : n.attrs.axis;
        if (n.in_vals[0].rank() == 1 || axis == 0) {
          std::size_t off = 0;
          for (std::size_t t = 0; t < n.in_vals.size(); ++t) {
            std::size_t sz = n.in_vals[t].numel();
            if (tracked(t)) {
              double* d = slot(n.in_ids[t], n.in_vals[t].shape).data();
              for (std::size_t i = 0; i < sz; ++i) d[i] += fs * g.data()[off + i];
            }
            off += sz;
          }
        } else {  // rank 2, axis 1
          int r = n.out.shape[0], ctot = n.out.shape[1];
          int off = 0;
          for (std::size_t t = 0; t < n.in_vals.size(); ++t) {
            int c = n.in_vals[t].shape[1];
            if (tracked(t)) {
              double* d = slot(n.in_ids[t], n.in_vals[t].shape).data();
              for (int i = 0; i < r; ++i)
                for (int j = 0; j < c; ++j)
                  d[static_cast<std::size_t>(i) * c + j] +=
                      fs * g.data()[static_cast<std::size_t>(i) * ctot + off + j];
            }
            off += c;
          }
        }
        break;
      }

      case Op::kSlice: {
        if (tracked(0)) {
          int axis = n.attrs.axis < 0 ? 0 : n.attrs.axis;
          double* d = slot(n.in_ids[0], n.in_vals[0].shape).data();
          if (n.in_vals[0].rank() == 1 || axis == 0) {
            std::size_t row = 1;
            for (int dd = 1; dd < n.in_vals[0].rank(); ++dd) row *= n.in_vals[0].shape[dd];
            std::size_t off = static_cast<std::size_t>(n.attrs.start) * row;
            for (std::size_t i = 0; i < g.numel(); ++i) d[off + i] += fs * g.data()[i];
          } else {
            int r = n.in_vals[0].shape[0], c = n.in_vals[0].shape[1];
            for (int i = 0; i < r; ++i)
              for (int j = 0; j < n.attrs.len; ++j)
                d[static_cast<std::size_t>(i) * c + n.attrs.start + j] +=
                    fs * g.data()[static_cast<std::size_t>(i) * n.attrs.len + j];
          }
        }
        break;
      }

      case Op::kStack: {
        std::size_t sz = n.in_vals[0].numel();
        for (std::size_t t = 0; t < n.in_vals.size(); ++t) {
          if (!tracked(t)) continue;
          double* d = slot(n.in_ids[t], n.in_vals[t].shape).data();
          for (std::size_t i = 0; i < sz; ++i) d[i] += fs * g.data()[t * sz + i];
        }
        break;
      }

      case Op::kSumAll:
      case Op::kMeanAll: {
        if (tracked(0)) {
          double* d = slot(n.in_ids[0], n.in_vals[0].shape).data();
          double gv = fs * g.value();
          if (n.op == Op::kMeanAll) gv /= static_cast<double>(n.in_vals[0].numel());
          for (std::size_t i = 0; i < n.in_vals[0].numel(); ++i) d[i] += gv;
        }
        break;
      }

      case Op::kSumAxis:
      case Op::kMeanAxis: {
        if (tracked(0)) {
          int r = n.in_vals[0].shape[0], c = n.in_vals[0].shape[1];
          int axis = n.attrs.axis;
          double denom = n.op == Op::kMeanAxis ? (axis == 0 ? r : c) : 1.0;
          double* d = slot(n.in_ids[0], n.in_vals[0].shape).data();
          for (int i = 0; i < r; ++i)
            for (int j = 0; j < c; ++j)
              d[static_cast<std::size_t>(i) * c + j] += fs * g.data()[axis == 0 ? j : i] / denom;
        }
        break;
      }

      case Op::kL2Norm: {
        if (tracked(0)) {
          double norm = n.out.value();
          double* d = slot(n.in_ids[0], n.in_vals[0].shape).data();
          if (norm > 1e-300) {
            double gv = fs * g.value() / norm;
            const double* x = n.in_vals[0].data();
            for (std::size_t i = 0; i < n.in_vals[0].numel(); ++i) d[i] += gv * x[i];
          }
        }
        break;
      }

      case Op::kConv1dCausal: {
        const Tensor& x = n.in_vals[0];
        const Tensor& w = n.in_vals[1];
        int T = x.shape[0], ci = x.shape[1];
        int K = w.shape[0], co = w.shape[2];
        if (tracked(0)) {
          double* d = slot(n.in_ids[0], x.shape).data();
          for (int t = 0; t < T; ++t)
            for (int k = 0; k < K; ++k) {
              int dst = t + k;
              if (dst >= T) continue;
              const double* gr = g.data() + static_cast<std::size_t>(dst) * co;
              const double* wk = w.data() + static_cast<std::size_t>(k) * ci * co;
              double* dr = d + static_cast<std::size_t>(t) * ci;
              for (int i = 0; i < ci; ++i) {
                const double* wi = wk + static_cast<std::size_t>(i) * co;
                double acc = 0.0;
                for (int j = 0; j < co; ++j) acc += gr[j] * wi[j];
                dr[i] += fs * acc;
              }
            }
        }
        if (tracked(1)) {
          double* d = slot(n.in_ids[1], w.shape).data();
          for (int t = 0; t < T; ++t)
            for (int k = 0; k < K; ++k) {
              int src = t - k;
              if (src < 0) continue;
              const double* xr = x.data() + static_cast<std::size_t>(src) * ci;
              const double* gr = g.data() + static_cast<std::size_t>(t) * co;
              double* dk = d + static_cast<std::size_t>(k) * ci * co;
              for (int i = 0; i < ci; ++i) {
                double xv = fs * xr[i];
                if (xv == 0.0) continue;
                double* di = dk + static_cast<std::size_t>(i) * co;
                for (int j = 0; j < co; ++j) di[j] += xv * gr[j];
              }
            }
        }
        break;
      }

      case Op::kReshape: {
        if (tracked(0)) {
          double* d = slot(n.in_ids[0], n.in_vals[0].shape).data();
          for (std::size_t i = 0; i < g.numel(); ++i) d[i] += fs * g.data()[i];
        }
        break;
      }
    }
  }

  for (std::size_t id = 0; id < tape.nodes.size(); ++id)
    if (grad[id].defined() && !all_finite(grad[id]))
      throw std::runtime_error(std::string("non-finite gradient at node ") + std::to_string(id) +
                               " (" + op_name(tape.nodes[id].op) + ")");
  return grad;
}

// Gradient map keyed by node id, as a thin view over the dense result.
inline std::unordered_map<int, Tensor> gradient_map(Tape& tape, const Tensor& loss) {
  auto dense = backward(tape, loss);
  std::unordered_map<int, Tensor> out;
  for (std::size_t i = 0; i < dense.size(); ++i)
    if (dense[i].defined()) out.emplace(static_cast<int>(i), std::move(dense[i]));
  return out;
}

}  // namespace dbr
