#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "moeclip/heads.hpp"

namespace moeclip {

struct LossWeights {
  double lambda_etf = 0.01;
  double lambda_bal = 0.01;
  double gamma = 2.0;
};

inline constexpr double kProbClip = 1e-7;
inline constexpr double kDiceSmooth = 1e-7;

/// -(1/N) sum (1 - p)^gamma log p over probabilities of the true class, clipped to [1e-7, 1 - 1e-7].
inline double focal_loss(std::span<const double> p_true, double gamma = 2.0) {
  detail::require_domain(!p_true.empty(), "focal_loss: empty map");
  double total = 0.0;
  for (double p : p_true) {
    const double q = std::clamp(p, kProbClip, 1.0 - kProbClip);
    total -= std::pow(1.0 - q, gamma) * std::log(q);
  }
  return total / static_cast<double>(p_true.size());
}

/// d focal_loss / d p_true (zero where clipping is active).
inline Vector focal_loss_grad(std::span<const double> p_true, double gamma = 2.0) {
  detail::require_domain(!p_true.empty(), "focal_loss_grad: empty map");
  const double n = static_cast<double>(p_true.size());
  Vector g(p_true.size());
  for (std::size_t i = 0; i < p_true.size(); ++i) {
    const double p = p_true[i];
    if (p < kProbClip || p > 1.0 - kProbClip) {
      g[i] = 0.0;
      continue;
    }
    const double one_minus = 1.0 - p;
    const double pow_term = gamma == 0.0 ? 0.0 : gamma * std::pow(one_minus, gamma - 1.0) * std::log(p);
    g[i] = -(-pow_term + std::pow(one_minus, gamma) / p) / n;
  }
  return g;
}

/// Probability of the ground-truth class at each pixel.
inline Vector true_class_probs(const AnomalyMap& map, std::span<const std::uint8_t> mask) {
  detail::require_shape(mask.size() == map.anomaly.size(), "true_class_probs: mask size mismatch");
  Vector p(mask.size());
  for (std::size_t i = 0; i < mask.size(); ++i) p[i] = mask[i] ? map.anomaly[i] : map.normal[i];
  return p;
}

/// 1 - (2 sum y yhat + s) / (sum y + sum yhat + s)
inline double dice_loss(std::span<const double> pred, std::span<const std::uint8_t> mask) {
  detail::require_shape(pred.size() == mask.size(), "dice_loss: shape mismatch");
  double inter = 0.0, sy = 0.0, sp = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    inter += mask[i] * pred[i];
    sy += mask[i];
    sp += pred[i];
  }
  return 1.0 - (2.0 * inter + kDiceSmooth) / (sy + sp + kDiceSmooth);
}

inline Vector dice_loss_grad(std::span<const double> pred, std::span<const std::uint8_t> mask) {
  detail::require_shape(pred.size() == mask.size(), "dice_loss_grad: shape mismatch");
  double inter = 0.0, sy = 0.0, sp = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    inter += mask[i] * pred[i];
    sy += mask[i];
    sp += pred[i];
  }
  const double num = 2.0 * inter + kDiceSmooth;
  const double den = sy + sp + kDiceSmooth;
  Vector g(pred.size());
  for (std::size_t i = 0; i < pred.size(); ++i) g[i] = -(2.0 * mask[i] * den - num) / (den * den);
  return g;
}

/// Binary cross-entropy of sigmoid(logit) against label, evaluated stably from the logit.
inline double bce_with_logit(double logit, double label) { return softplus(logit) - label * logit; }

inline double bce_with_logit_grad(double logit, double label) { return sigmoid(logit) - label; }

/// Plain BCE on a probability, for reporting and cross-checks.
inline double bce(double prob, double label) {
  const double p = std::clamp(prob, kProbClip, 1.0 - kProbClip);
  return -(label * std::log(p) + (1.0 - label) * std::log(1.0 - p));
}

/// Focal + Dice for one map.
inline double map_seg_loss(const AnomalyMap& map, std::span<const std::uint8_t> mask, double gamma = 2.0) {
  return focal_loss(true_class_probs(map, mask), gamma) + dice_loss(map.anomaly, mask);
}

/// d(focal + dice) / d(anomaly channel), with per-term weights.
inline Vector map_seg_loss_grad(const AnomalyMap& map, std::span<const std::uint8_t> mask, double gamma = 2.0,
                                double focal_weight = 1.0, double dice_weight = 1.0) {
  Vector g(mask.size(), 0.0);
  if (focal_weight != 0.0) {
    const Vector gf = focal_loss_grad(true_class_probs(map, mask), gamma);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += focal_weight * (mask[i] ? gf[i] : -gf[i]);
  }
  if (dice_weight != 0.0) axpy(dice_weight, dice_loss_grad(map.anomaly, mask), g);
  return g;
}

/// Sum over every (level, scale) map of focal + dice.
inline double seg_loss(const std::vector<AnomalyMap>& maps, std::span<const std::uint8_t> mask, double gamma = 2.0) {
  detail::require_domain(!maps.empty(), "seg_loss: no maps");
  double total = 0.0;
  for (const auto& m : maps) total += map_seg_loss(m, mask, gamma);
  return total;
}

struct LossComponents {
  double seg = 0.0;
  double ac = 0.0;
  double etf = 0.0;
  double bal = 0.0;
};

inline double total_loss(const LossComponents& c, const LossWeights& w) {
  return c.seg + c.ac + w.lambda_etf * c.etf + w.lambda_bal * c.bal;
}

}  // namespace moeclip
