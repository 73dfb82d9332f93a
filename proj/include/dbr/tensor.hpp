#pragma once

#include <cmath>
#include <cstddef>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "dbr/rng.hpp"

namespace dbr {

using Shape = std::vector<int>;

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (int e : s) {
    if (e <= 0) throw std::invalid_argument("tensor extent must be positive");
    n *= static_cast<std::size_t>(e);
  }
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

// Dense row-major value. Copies share the buffer; primitives never mutate
// their inputs, so sharing is safe. `node` links the value to the tape entry
// that produced it (-1 when untracked).
struct Tensor {
  Shape shape;
  std::shared_ptr<std::vector<double>> buf;
  bool requires_grad = false;
  int node = -1;

  Tensor() = default;
  explicit Tensor(Shape s) : shape(std::move(s)) {
    buf = std::make_shared<std::vector<double>>(shape_numel(shape), 0.0);
  }
  Tensor(Shape s, std::vector<double> values) : shape(std::move(s)) {
    if (values.size() != shape_numel(shape))
      throw std::invalid_argument("tensor data length does not match shape " + shape_str(shape));
    buf = std::make_shared<std::vector<double>>(std::move(values));
  }

  bool defined() const { return static_cast<bool>(buf); }
  std::size_t numel() const { return buf ? buf->size() : 0; }
  int rank() const { return static_cast<int>(shape.size()); }
  double* data() { return buf->data(); }
  const double* data() const { return buf->data(); }

  int rows() const {
    if (rank() != 2) throw std::logic_error("rows(): tensor is not 2-d");
    return shape[0];
  }
  int cols() const {
    if (rank() != 2) throw std::logic_error("cols(): tensor is not 2-d");
    return shape[1];
  }

  double& at(int i) { return (*buf)[static_cast<std::size_t>(i)]; }
  double at(int i) const { return (*buf)[static_cast<std::size_t>(i)]; }
  double& at(int i, int j) { return (*buf)[static_cast<std::size_t>(i) * shape[1] + j]; }
  double at(int i, int j) const { return (*buf)[static_cast<std::size_t>(i) * shape[1] + j]; }

  bool is_scalar() const { return numel() == 1; }
  double value() const {
    if (!is_scalar()) throw std::logic_error("value(): tensor is not scalar");
    return (*buf)[0];
  }

  // Deep copy with its own buffer, detached from any tape.
  Tensor clone() const {
    Tensor t;
    t.shape = shape;
    t.buf = std::make_shared<std::vector<double>>(*buf);
    return t;
  }

  static Tensor scalar(double v) { return Tensor(Shape{}, {v}); }
  static Tensor zeros(Shape s) { return Tensor(std::move(s)); }
  static Tensor full(Shape s, double v) {
    Tensor t(std::move(s));
    for (auto& x : *t.buf) x = v;
    return t;
  }
  static Tensor randn(Rng& rng, Shape s, double stddev) {
    Tensor t(std::move(s));
    for (auto& x : *t.buf) x = rng.gaussian(0.0, stddev);
    return t;
  }
};

inline bool same_shape(const Tensor& a, const Tensor& b) { return a.shape == b.shape; }

inline bool all_finite(const Tensor& t) {
  for (double v : *t.buf)
    if (!std::isfinite(v)) return false;
  return true;
}

}  // namespace dbr
