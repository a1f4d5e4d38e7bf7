#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "rsaforge/errors.hpp"
#include "rsaforge/model.hpp"
#include "rsaforge/tensor.hpp"

namespace rsaforge {

// SGD with classic momentum and coupled L2 weight decay:
//   g' = g + weight_decay * w
//   v  = momentum * v + g'
//   w  = w - lr * v
// BN running statistics are not parameters and never pass through here.
struct OptimState {
  float learning_rate = 0.1f;
  float momentum = 0.9f;
  float weight_decay = 1e-4f;
  std::vector<Tensor> velocity;  // one per parameter, zero-initialized

  OptimState() = default;
  OptimState(float lr, float mom, float wd) : learning_rate(lr), momentum(mom), weight_decay(wd) {
    if (!(lr > 0.0f)) throw ValueError("sgd: learning rate must be > 0");
    if (!(mom >= 0.0f && mom < 1.0f)) throw ValueError("sgd: momentum must be in [0,1)");
    if (!(wd >= 0.0f)) throw ValueError("sgd: weight decay must be >= 0");
  }

  void init(const std::vector<NamedParam>& params) {
    velocity.clear();
    velocity.reserve(params.size());
    for (const auto& p : params) velocity.emplace_back(p.tensor->shape());
  }
};

inline void sgd_step(const std::vector<NamedParam>& params, const std::vector<Tensor>& grads,
                     OptimState& state) {
  if (params.size() != grads.size())
    throw ShapeError("sgd_step: " + std::to_string(grads.size()) + " gradients for " +
                     std::to_string(params.size()) + " parameters");
  if (state.velocity.empty()) state.init(params);
  if (state.velocity.size() != params.size())
    throw ShapeError("sgd_step: optimizer state does not match parameter list");

  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& w = *params[i].tensor;
    const Tensor& g = grads[i];
    Tensor& v = state.velocity[i];
    if (!w.same_shape(g))
      throw ShapeError("sgd_step: gradient shape " + g.shape_str() + " does not match " +
                       params[i].name + " " + w.shape_str());
    for (std::size_t j = 0; j < w.size(); ++j) {
      if (!std::isfinite(g[j]))
        throw ValueError("sgd_step: non-finite gradient in " + params[i].name);
      const float g_eff = g[j] + state.weight_decay * w[j];
      v[j] = state.momentum * v[j] + g_eff;
      w[j] -= state.learning_rate * v[j];
    }
  }
}

} // namespace rsaforge
