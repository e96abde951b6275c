#include "dynainfer/optim.hpp"

#include <cmath>

#include "dynainfer/errors.hpp"

namespace dynainfer {

OptimState OptimState::for_params(const Tensor& params, AdamConfig config) {
  return OptimState{Tensor::zeros_like(params), Tensor::zeros_like(params), 0,
                    config};
}

void optim_step(OptimState& state, Tensor& params, const Tensor& grads) {
  require_same_shape(params, grads, "optim_step");
  require_same_shape(params, state.m, "optim_step (moments)");
  const AdamConfig& c = state.config;
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double correct1 = 1.0 - std::pow(c.beta1, t);
  const double correct2 = 1.0 - std::pow(c.beta2, t);
  double* p = params.ptr();
  double* m = state.m.ptr();
  double* v = state.v.ptr();
  const double* g = grads.ptr();
  for (std::size_t i = 0; i < params.size(); ++i) {
    m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
    v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
    const double mhat = m[i] / correct1;
    const double vhat = v[i] / correct2;
    p[i] -= c.lr * mhat / (std::sqrt(vhat) + c.eps);
  }
}

}  // namespace dynainfer
