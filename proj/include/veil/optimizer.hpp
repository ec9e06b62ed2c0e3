#pragma once

#include <unordered_map>
#include <vector>

#include "veil/tensor.hpp"

namespace veil {

// Momentum SGD state. Velocity buffers are created on first step and always
// mirror their parameter's shape. Frozen parameters are excluded by the
// caller, never passed in.
struct OptimizerState {
  double learning_rate = 0.01;
  double momentum = 0.0;

  OptimizerState() = default;
  OptimizerState(double lr, double mom);

  // Drops velocity for the given parameters (after a head re-init).
  void reset(const std::vector<Tensor>& params);

  std::unordered_map<detail::TensorImpl*, std::vector<double>> velocity;
};

// v <- momentum*v - lr*grad; p <- p + v; grad zeroed afterwards.
// Throws if any parameter arrives without a populated gradient.
void sgd_step(const std::vector<Tensor>& params, OptimizerState& state);

}  // namespace veil
