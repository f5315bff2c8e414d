#pragma once

// AdamW with decoupled weight decay.

#include <cmath>
#include <string>
#include <vector>

#include "mmfd/grad_check.hpp"

namespace mmfd {

struct AdamWOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

struct AdamWState {
  AdamWOptions options;
  std::vector<std::vector<double>> m, v;  // one accumulator per parameter
  std::size_t t = 0;
};

inline AdamWState make_adamw_state(const std::vector<NamedTensor>& params, const AdamWOptions& opt) {
  if (opt.beta1 < 0.0 || opt.beta1 >= 1.0 || opt.beta2 < 0.0 || opt.beta2 >= 1.0)
    throw ContractError("adamw: betas must lie in [0, 1)");
  AdamWState s;
  s.options = opt;
  for (const auto& [_, p] : params) {
    s.m.emplace_back(p.numel(), 0.0);
    s.v.emplace_back(p.numel(), 0.0);
  }
  return s;
}

/// One update using each parameter's accumulated .grad (missing grad counts
/// as zero):
///   m ← β1·m + (1-β1)·g,  v ← β2·v + (1-β2)·g²
///   p ← p·(1 - lr·λ) - lr·m̂ / (√v̂ + eps)
/// which is p - lr·(m̂/(√v̂+eps) + λ·p) with the decay applied as an exact
/// multiplicative factor.
inline void adamw_step(const std::vector<NamedTensor>& params, AdamWState& state) {
  if (params.size() != state.m.size()) {
    throw ShapeError("adamw_step: " + std::to_string(params.size()) + " parameters but state holds " +
                     std::to_string(state.m.size()));
  }
  const auto& o = state.options;
  ++state.t;
  const double bc1 = 1.0 - std::pow(o.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(o.beta2, static_cast<double>(state.t));
  const double decay = 1.0 - o.lr * o.weight_decay;
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor p = params[k].second;
    auto& m = state.m[k];
    auto& v = state.v[k];
    if (m.size() != p.numel()) {
      throw ShapeError("adamw_step: state for '" + params[k].first + "' has " + std::to_string(m.size()) +
                       " entries, parameter has " + std::to_string(p.numel()));
    }
    auto val = p.mutable_values();
    const bool has = p.has_grad();
    auto g = p.grad();
    for (std::size_t i = 0; i < val.size(); ++i) {
      const double gi = has ? g[i] : 0.0;
      m[i] = o.beta1 * m[i] + (1.0 - o.beta1) * gi;
      v[i] = o.beta2 * v[i] + (1.0 - o.beta2) * gi * gi;
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      val[i] = val[i] * decay - o.lr * mhat / (std::sqrt(vhat) + o.eps);
    }
  }
}

}  // namespace mmfd
