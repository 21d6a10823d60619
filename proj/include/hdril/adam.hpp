#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "hdril/autodiff.hpp"

namespace hdril::ad {

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Moment buffers for one parameter group. The group is fixed on the first
/// step; later steps must pass the same parameters in the same order.
struct AdamState {
  AdamConfig config;
  std::size_t step = 0;
  std::vector<Tensor> first_moment;
  std::vector<Tensor> second_moment;

  AdamState() = default;
  explicit AdamState(AdamConfig c) : config(c) {}
};

/// Bias-corrected Adam update; zeroes the gradients it consumed.
inline void adam_step(std::span<Parameter* const> params, AdamState& state) {
  for (const Parameter* p : params) {
    if (!p->grad_ready || p->grad.shape != p->value.shape) {
      throw ContractError("adam_step: parameter '" + p->name + "' has no gradient");
    }
  }
  if (state.step == 0) {
    state.first_moment.clear();
    state.second_moment.clear();
    for (const Parameter* p : params) {
      state.first_moment.emplace_back(p->value.shape, 0.0);
      state.second_moment.emplace_back(p->value.shape, 0.0);
    }
  } else if (state.first_moment.size() != params.size()) {
    throw ContractError("adam_step: parameter group changed between steps");
  }
  ++state.step;
  const AdamConfig& c = state.config;
  const double t = static_cast<double>(state.step);
  const double correction1 = 1.0 - std::pow(c.beta1, t);
  const double correction2 = 1.0 - std::pow(c.beta2, t);
  for (std::size_t k = 0; k < params.size(); ++k) {
    Parameter& p = *params[k];
    Tensor& m = state.first_moment[k];
    Tensor& v = state.second_moment[k];
    if (m.shape != p.value.shape) throw ContractError("adam_step: moment shape mismatch for '" + p.name + "'");
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double g = p.grad.data[i];
      m.data[i] = c.beta1 * m.data[i] + (1.0 - c.beta1) * g;
      v.data[i] = c.beta2 * v.data[i] + (1.0 - c.beta2) * g * g;
      const double m_hat = m.data[i] / correction1;
      const double v_hat = v.data[i] / correction2;
      p.value.data[i] -= c.learning_rate * m_hat / (std::sqrt(v_hat) + c.epsilon);
    }
    p.zero_grad();
  }
}

}  // namespace hdril::ad
