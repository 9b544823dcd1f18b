#include "infusion/optimizer.hpp"

#include <cmath>

#include "infusion/errors.hpp"

namespace infusion {

void adam_step(NamedTensors& params, const GradientMap& grads, OptimizerState& state,
               const AdamConfig& config) {
  if (!(config.lr > 0.0)) throw ContractError("adam_step: learning rate must be positive");
  for (const auto& [name, p] : params) {
    auto it = grads.find(name);
    if (it == grads.end()) throw ContractError("adam_step: missing gradient for '" + name + "'");
    if (!it->second.same_shape(p)) {
      throw ShapeError("adam_step: gradient shape " + shape_string(it->second.shape()) +
                       " for parameter '" + name + "' of shape " + shape_string(p.shape()));
    }
  }

  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(config.beta1, t);
  const double c2 = 1.0 - std::pow(config.beta2, t);

  for (auto& [name, p] : params) {
    const Tensor& g = grads.at(name);
    auto [m_it, m_new] = state.first_moment.try_emplace(name, p.shape());
    auto [v_it, v_new] = state.second_moment.try_emplace(name, p.shape());
    Tensor& m = m_it->second;
    Tensor& v = v_it->second;
    if (!m.same_shape(p) || !v.same_shape(p)) {
      throw ShapeError("adam_step: moment shape mismatch for '" + name + "'");
    }
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * g[i];
      v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * g[i] * g[i];
      const double m_hat = m[i] / c1;
      const double v_hat = v[i] / c2;
      p[i] -= config.lr * m_hat / (std::sqrt(v_hat) + config.eps);
    }
  }
}

}  // namespace infusion
