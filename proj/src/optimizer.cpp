#include "veil/optimizer.hpp"

#include <string>

#include "veil/error.hpp"

namespace veil {

OptimizerState::OptimizerState(double lr, double mom) : learning_rate(lr), momentum(mom) {
  if (lr < 0.0) throw ConfigError("OptimizerState: learning rate must be >= 0");
  if (mom < 0.0 || mom >= 1.0) throw ConfigError("OptimizerState: momentum must be in [0,1)");
}

void OptimizerState::reset(const std::vector<Tensor>& params) {
  for (const Tensor& p : params) velocity.erase(p.impl().get());
}

void sgd_step(const std::vector<Tensor>& params, OptimizerState& state) {
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor p = params[pi];
    detail::TensorImpl* key = p.impl().get();
    if (!p.has_grad()) {
      throw Error("sgd_step: parameter " + std::to_string(pi) + " has no gradient");
    }
    auto& v = state.velocity[key];
    if (v.size() != p.size()) v.assign(p.size(), 0.0);
    double* pd = p.data();
    double* gd = p.grad_data();
    const double lr = state.learning_rate;
    const double mu = state.momentum;
    for (std::size_t i = 0; i < p.size(); ++i) {
      v[i] = mu * v[i] - lr * gd[i];
      pd[i] += v[i];
      gd[i] = 0.0;
    }
  }
}

}  // namespace veil
