#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "dbr/ops.hpp"

namespace dbr {

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

struct GradCheckParam {
  std::string name;
  Tensor* tensor;
};

// Central-difference check of d(f)/d(params) against the tape gradients.
// `f` must evaluate the scalar objective on the given tape (nullptr tape
// means plain forward) after re-binding its leaves, and must be
// deterministic. Relative error uses max(1,|a|,|n|) as the denominator.
inline GradCheckReport finite_diff_check(const std::function<Tensor(Tape*)>& f,
                                         const std::vector<GradCheckParam>& params,
                                         double eps = 1e-5) {
  if (eps <= 0) throw std::invalid_argument("finite_diff_check: eps must be positive");

  Tape tape;
  Tensor loss = f(&tape);
  if (!loss.is_scalar()) throw std::invalid_argument("finite_diff_check: objective is not scalar");
  auto grads = backward(tape, loss);

  GradCheckReport rep;
  for (const auto& p : params) {
    Tensor& x = *p.tensor;
    const Tensor* g = (x.node >= 0 && grads[x.node].defined()) ? &grads[x.node] : nullptr;
    for (std::size_t i = 0; i < x.numel(); ++i) {
      double saved = x.data()[i];
      x.data()[i] = saved + eps;
      double up = f(nullptr).value();
      x.data()[i] = saved - eps;
      double down = f(nullptr).value();
      x.data()[i] = saved;
      if (!std::isfinite(up) || !std::isfinite(down))
        throw std::runtime_error("finite_diff_check: objective not finite near " + p.name);
      double numeric = (up - down) / (2.0 * eps);
      double analytic = g ? g->data()[i] : 0.0;
      double rel = std::fabs(analytic - numeric) /
                   std::max({1.0, std::fabs(analytic), std::fabs(numeric)});
      if (rel > rep.max_rel_error) {
        rep.max_rel_error = rel;
        rep.worst_param = p.name;
        rep.worst_index = i;
        rep.worst_analytic = analytic;
        rep.worst_numeric = numeric;
      }
    }
  }
  return rep;
}

}  // namespace dbr
