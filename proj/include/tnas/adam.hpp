#pragma once

#include <cmath>
#include <cstdint>

#include "tnas/tensor.hpp"

namespace tnas {

struct AdamHyper {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Moment estimates for one parameter tensor. Each tensor keeps its own step
/// counter so a parameter that sits out a step (an untouched supernet branch)
/// is left exactly as it was.
struct AdamState {
  std::uint64_t step = 0;
  Tensor m;
  Tensor v;
};

/// One bias-corrected Adam update of `param` in place.
inline void adam_step(Tensor& param, const Tensor& grad, AdamState& state, const AdamHyper& hyper) {
  param.require_same_shape(grad, "adam_step");
  if (state.m.empty()) {
    state.m = Tensor(param.shape());
    state.v = Tensor(param.shape());
  }
  param.require_same_shape(state.m, "adam_step state");
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(hyper.beta1, t);
  const double c2 = 1.0 - std::pow(hyper.beta2, t);
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = grad[i];
    state.m[i] = hyper.beta1 * state.m[i] + (1.0 - hyper.beta1) * g;
    state.v[i] = hyper.beta2 * state.v[i] + (1.0 - hyper.beta2) * g * g;
    const double mhat = state.m[i] / c1;
    const double vhat = state.v[i] / c2;
    param[i] -= hyper.lr * mhat / (std::sqrt(vhat) + hyper.epsilon);
  }
}

}  // namespace tnas
