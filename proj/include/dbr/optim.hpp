#pragma once

#include <cmath>
#include <vector>

#include "dbr/params.hpp"

namespace dbr {

// Adam with bias correction. Weight decay is the coupled (L2-in-gradient)
// form; decay applies to every parameter each step, including ones whose
// gradient did not flow this batch.
struct AdamState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  long long t = 0;

  static AdamState init(const ParamStore& store) {
    AdamState s;
    s.m.reserve(store.size());
    s.v.reserve(store.size());
    for (std::size_t i = 0; i < store.size(); ++i) {
      s.m.push_back(Tensor(store.entry(i).tensor.shape));
      s.v.push_back(Tensor(store.entry(i).tensor.shape));
    }
    return s;
  }
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

// grads[i] aligns with store entry i; an undefined tensor means zero.
inline void adam_step(ParamStore& store, const std::vector<Tensor>& grads, AdamState& state,
                      const AdamConfig& cfg) {
  if (grads.size() != store.size() || state.m.size() != store.size())
    throw std::invalid_argument("adam_step: gradient/state size mismatch");
  state.t += 1;
  double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
  double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
  for (std::size_t p = 0; p < store.size(); ++p) {
    Tensor& x = store.entry(p).tensor;
    if (grads[p].defined() && grads[p].shape != x.shape)
      throw std::invalid_argument("adam_step: gradient shape mismatch at " + store.entry(p).name);
    double* xm = state.m[p].data();
    double* xv = state.v[p].data();
    double* xd = x.data();
    const double* gd = grads[p].defined() ? grads[p].data() : nullptr;
    for (std::size_t i = 0; i < x.numel(); ++i) {
      double g = (gd ? gd[i] : 0.0) + cfg.weight_decay * xd[i];
      xm[i] = cfg.beta1 * xm[i] + (1.0 - cfg.beta1) * g;
      xv[i] = cfg.beta2 * xv[i] + (1.0 - cfg.beta2) * g * g;
      double mhat = xm[i] / bc1;
      double vhat = xv[i] / bc2;
      xd[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
  }
}

}  // namespace dbr
