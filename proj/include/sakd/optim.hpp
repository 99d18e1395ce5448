// SPDX-License-Identifier: Apache-2.0
//
// SGD with momentum and coupled weight decay, plus a milestone learning-rate
// schedule:
//   v <- momentum * v + g + weight_decay * p
//   p <- p - lr * v

#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sakd/errors.hpp"
#include "sakd/tensor.hpp"

namespace sakd {

struct SgdConfig {
  double lr = 0.05;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::vector<std::size_t> milestones;
  double gamma = 0.1;

  void validate() const {
    if (!(lr > 0.0)) throw ConfigError("sgd: lr must be > 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("sgd: momentum must be in [0, 1)");
    if (!(weight_decay >= 0.0)) throw ConfigError("sgd: weight_decay must be >= 0");
    if (!(gamma > 0.0 && gamma <= 1.0)) throw ConfigError("sgd: gamma must be in (0, 1]");
    for (std::size_t i = 1; i < milestones.size(); ++i) {
      if (milestones[i] <= milestones[i - 1]) {
        throw ConfigError("sgd: milestones must be strictly increasing");
      }
    }
  }
};

/// base lr times gamma per milestone already reached.
inline double lr_at(const SgdConfig& config, std::size_t epoch) {
  double lr = config.lr;
  for (std::size_t m : config.milestones) {
    if (epoch >= m) lr *= config.gamma;
  }
  return lr;
}

struct SgdState {
  SgdConfig config;
  double lr = 0.0;
  std::vector<Tensor> velocity;  // aligned with the group's parameter order
};

inline SgdState make_sgd(const SgdConfig& config, std::span<Tensor* const> params) {
  config.validate();
  SgdState state{config, config.lr, {}};
  for (const Tensor* p : params) state.velocity.push_back(Tensor::zeros(p->shape()));
  return state;
}

/// One update. Parameters whose gradient is absent keep both their value and
/// their velocity.
inline void sgd_step(std::span<Tensor* const> params, std::span<const std::optional<Tensor>> grads,
                     SgdState& state) {
  if (params.size() != grads.size() || params.size() != state.velocity.size()) {
    throw ShapeError("sgd_step: " + std::to_string(params.size()) + " params, " +
                     std::to_string(grads.size()) + " grads, " +
                     std::to_string(state.velocity.size()) + " velocities");
  }
  if (!(state.lr > 0.0)) throw ConfigError("sgd_step: lr must be > 0");
  const double m = state.config.momentum, wd = state.config.weight_decay, lr = state.lr;
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (!grads[k]) continue;
    const Tensor& p = *params[k];
    const Tensor& g = *grads[k];
    const Tensor& v = state.velocity[k];
    if (g.shape() != p.shape() || v.shape() != p.shape()) {
      throw ShapeError("sgd_step: gradient " + to_string(g.shape()) + " for parameter " +
                       to_string(p.shape()));
    }
    std::vector<double> nv(p.size()), np(p.size());
    for (std::size_t i = 0; i < p.size(); ++i) {
      nv[i] = m * v[i] + g[i] + wd * p[i];
      np[i] = p[i] - lr * nv[i];
    }
    state.velocity[k] = Tensor(p.shape(), std::move(nv));
    *params[k] = Tensor(p.shape(), std::move(np));
  }
}

}  // namespace sakd
