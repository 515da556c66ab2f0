#pragma once

#include <cmath>

#include "dtomo/tensor.hpp"

namespace dtomo {

/// Adam with bias correction. One state per parameter tensor.
struct AdamState {
  Tensor m;  // first moment
  Tensor v;  // second moment
  int64_t t = 0;

  explicit AdamState(const std::vector<int64_t>& shape)
      : m(Tensor::zeros(shape)), v(Tensor::zeros(shape)) {}
  AdamState() = default;
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// In-place parameter update from a gradient of the same shape.
inline void adam_step(Tensor& param, const Tensor& grad, AdamState& state, const AdamConfig& cfg) {
  if (!param.same_shape(grad) || !param.same_shape(state.m))
    throw ShapeError("adam_step: parameter/gradient/state shape mismatch");
  state.t += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
  for (int64_t i = 0; i < param.numel(); ++i) {
    const double g = grad[i];
    state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
    state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
    const double mhat = state.m[i] / bc1;
    const double vhat = state.v[i] / bc2;
    param[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
  }
}

}  // namespace dtomo
