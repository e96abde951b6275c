#pragma once

#include <cstdint>

#include "dynainfer/tensor.hpp"

namespace dynainfer {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adaptive-moment state for one parameter tensor.
struct OptimState {
  Tensor m;
  Tensor v;
  std::uint64_t step = 0;
  AdamConfig config;

  static OptimState for_params(const Tensor& params, AdamConfig config = {});
};

/// One bias-corrected adaptive-moment update, in place.
void optim_step(OptimState& state, Tensor& params, const Tensor& grads);

}  // namespace dynainfer
