#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "protodrift/error.hpp"
#include "protodrift/tensor.hpp"

namespace protodrift {

struct Milestone {
  std::size_t iteration = 0;
  double multiplier = 0.1;

  friend bool operator==(const Milestone&, const Milestone&) = default;
};

struct SgdConfig {
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::size_t warmup_iters = 20;
  std::vector<Milestone> milestones;

  friend bool operator==(const SgdConfig&, const SgdConfig&) = default;
};

inline void validate(const SgdConfig& cfg) {
  if (!(cfg.lr > 0.0) || !std::isfinite(cfg.lr)) throw ConfigError("lr must be positive");
  if (!(cfg.momentum >= 0.0 && cfg.momentum < 1.0)) throw ConfigError("momentum must be in [0,1)");
  if (!(cfg.weight_decay >= 0.0)) throw ConfigError("weight_decay must be non-negative");
  for (const auto& m : cfg.milestones) {
    if (!(m.multiplier > 0.0)) throw ConfigError("milestone multiplier must be positive");
  }
}

// base lr x linear warmup ((iter+1)/warmup_iters, capped at 1) x every
// milestone multiplier whose iteration has been reached.
inline double effective_lr(const SgdConfig& cfg, std::size_t iter) {
  double lr = cfg.lr;
  if (cfg.warmup_iters > 0 && iter < cfg.warmup_iters) {
    lr *= static_cast<double>(iter + 1) / static_cast<double>(cfg.warmup_iters);
  }
  for (const auto& m : cfg.milestones) {
    if (iter >= m.iteration) lr *= m.multiplier;
  }
  return lr;
}

struct OptimizerState {
  SgdConfig config;
  ParameterMap velocity;
};

// v <- momentum*v + g + weight_decay*w ;  w <- w - lr_eff*v
// Only parameters that have an entry in `grads` move.
inline void sgd_step(ParameterMap& params, const ParameterMap& grads, OptimizerState& state,
                     std::size_t iter) {
  const double lr = effective_lr(state.config, iter);
  if (!(lr > 0.0)) throw Error("effective learning rate is not positive at iteration " + std::to_string(iter));

  for (const auto& [name, g] : grads) {
    auto it = params.find(name);
    if (it == params.end()) throw Error("gradient for unknown parameter '" + name + "'");
    Tensor& w = it->second;
    if (g.shape() != w.shape()) {
      throw Error("gradient shape " + g.shape_string() + " does not match parameter '" + name + "' " +
                  w.shape_string());
    }
    if (!g.all_finite()) throw Error("non-finite gradient for parameter '" + name + "'");

    auto [vit, inserted] = state.velocity.try_emplace(name, Tensor::zeros(w.shape()));
    Tensor& v = vit->second;
    if (v.shape() != w.shape()) throw Error("velocity shape drifted for parameter '" + name + "'");

    for (std::size_t i = 0; i < w.size(); ++i) {
      v[i] = state.config.momentum * v[i] + g[i] + state.config.weight_decay * w[i];
      w[i] -= lr * v[i];
    }
  }
}

}  // namespace protodrift
