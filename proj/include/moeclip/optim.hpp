#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "moeclip/linalg.hpp"

namespace moeclip {

struct AdamHyper {
  double lr = 5e-4;
  double beta1 = 0.5;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Moment buffers for a list of parameter tensors.
struct AdamState {
  std::vector<Vector> m;
  std::vector<Vector> v;
  std::uint64_t step = 0;

  friend bool operator==(const AdamState&, const AdamState&) = default;
};

/**
 * One bias-corrected Adam update over a list of tensors:
 *   m = b1 m + (1 - b1) g,  v = b2 v + (1 - b2) g^2,
 *   p -= lr * (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps).
 */
inline void adam_step(const std::vector<std::span<double>>& params, const std::vector<std::span<const double>>& grads,
                      AdamState& state, const AdamHyper& h) {
  detail::require_shape(params.size() == grads.size(), "adam_step: params/grads count mismatch");
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.size(), 0.0);
      state.v.emplace_back(p.size(), 0.0);
    }
  }
  detail::require_shape(state.m.size() == params.size(), "adam_step: state/param count mismatch");
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(h.beta1, t);
  const double c2 = 1.0 - std::pow(h.beta2, t);
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto p = params[k];
    auto g = grads[k];
    auto& m = state.m[k];
    auto& v = state.v[k];
    detail::require_shape(p.size() == g.size() && p.size() == m.size(), "adam_step: tensor shape mismatch");
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g[i];
      v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * g[i] * g[i];
      p[i] -= h.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + h.eps);
    }
  }
}

/// Multi-step decay: lr * factor^(number of milestones already passed). Milestones are fractions of total_steps.
inline double scheduled_lr(double base_lr, std::uint64_t step, std::uint64_t total_steps,
                           const std::vector<double>& milestones, double factor) {
  double lr = base_lr;
  for (double frac : milestones)
    if (static_cast<double>(step) >= std::floor(frac * static_cast<double>(total_steps))) lr *= factor;
  return lr;
}

}  // namespace moeclip
