#pragma once

#include <cstdint>

#include "infusion/tensor.hpp"

namespace infusion {

struct AdamConfig {
  double lr = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct OptimizerState {
  NamedTensors first_moment;
  NamedTensors second_moment;
  std::uint64_t step = 0;
};

// One bias-corrected Adam update of every entry in `params`. Each parameter
// must have a gradient of identical shape in `grads`.
void adam_step(NamedTensors& params, const GradientMap& grads, OptimizerState& state,
               const AdamConfig& config);

}  // namespace infusion
