#pragma once

#include <cstddef>
#include <vector>

#include "moeclip/experts.hpp"
#include "moeclip/router.hpp"

namespace moeclip {

struct AdaptOptions {
  std::size_t top_k = 2;
  double lambda_moe = 0.1;
  double eps = 1e-6;
  bool training = false;
};

/// Per-layer MoE adaptation results, plus what the backward pass needs.
struct AdaptOutputs {
  Matrix adapted;  // F_moe, L x d
  ExpertOutputs expert_outputs;
  RoutingResult routing;

  // Cached intermediates.
  Matrix mixed;                         // F_expert, L x d
  std::vector<std::vector<Vector>> masks;   // [patch][expert] dropout masks
  std::vector<std::vector<Vector>> hidden;  // [patch][expert] A * x~
};

/// Gradients of one adaptation layer.
struct AdaptGrads {
  Matrix router;           // K x d
  std::vector<Matrix> B;   // K of d x r
  Matrix features;         // dL/dF, L x d

  static AdaptGrads zeros_like(const RouterParams& router, const ExpertBank& bank, std::size_t patches) {
    AdaptGrads g;
    g.router = Matrix(router.weight.rows(), router.weight.cols());
    for (const auto& e : bank.experts) g.B.emplace_back(e.B.rows(), e.B.cols());
    g.features = Matrix(patches, router.weight.cols());
    return g;
  }
};

/**
 * Route, evaluate all K experts, mix with the Top-k weights, rescale the
 * mixture to the input norm and blend it back with weight lambda_moe.
 */
inline AdaptOutputs adapt_layer(const Matrix& features, const RouterParams& router, const ExpertBank& bank,
                                const AdaptOptions& opt, SeededRng& rng) {
  const std::size_t L = features.rows();
  const std::size_t d = features.cols();
  const std::size_t K = bank.size();
  detail::require_shape(router.num_experts() == K, "adapt_layer: router/bank expert count mismatch");
  detail::require_shape(bank.dim() == d, "adapt_layer: bank dim != feature dim");
  detail::require_domain(opt.top_k >= 1 && opt.top_k <= K, "adapt_layer: top_k out of range");
  detail::require_domain(opt.lambda_moe >= 0.0 && opt.lambda_moe <= 1.0, "adapt_layer: lambda_moe outside [0,1]");

  AdaptOutputs out;
  out.routing = route_topk(features, router, opt.top_k);
  out.expert_outputs = ExpertOutputs(L, K, d);
  out.mixed = Matrix(L, d);
  out.adapted = Matrix(L, d);
  out.masks.assign(L, std::vector<Vector>(K));
  out.hidden.assign(L, std::vector<Vector>(K));

  for (std::size_t i = 0; i < L; ++i) {
    const auto x = features.row(i);
    for (std::size_t n = 0; n < K; ++n) {
      const auto& e = bank.experts[n];
      out.masks[i][n] = dropout_mask(d, e.dropout_p, opt.training, rng);
      const Vector y = expert_forward_masked(x, e, out.masks[i][n], &out.hidden[i][n]);
      std::copy(y.begin(), y.end(), out.expert_outputs.at(i, n).begin());
    }
    auto mixed = out.mixed.row(i);
    for (auto n : out.routing.topk_indices[i]) axpy(out.routing.topk_weights(i, n), out.expert_outputs.at(i, n), mixed);

    const double mixed_norm = norm(mixed);
    const double scale = mixed_norm > 0.0 ? norm(x) / (mixed_norm + opt.eps) : 0.0;
    auto y = out.adapted.row(i);
    for (std::size_t j = 0; j < d; ++j) y[j] = opt.lambda_moe * (mixed[j] * scale) + (1.0 - opt.lambda_moe) * x[j];
  }
  return out;
}

/**
 * Backward of adapt_layer.
 *
 * d_adapted: gradient on F_moe. d_experts: extra gradient on the raw expert
 * outputs (ETF term), may be empty. d_probs: extra gradient on the softmax
 * probabilities (balance term), may be empty. Gradients are accumulated into
 * grads.
 */
inline void adapt_layer_backward(const Matrix& features, const RouterParams& router, const ExpertBank& bank,
                                 const AdaptOptions& opt, const AdaptOutputs& out, const Matrix& d_adapted,
                                 const ExpertOutputs* d_experts, const Matrix* d_probs, AdaptGrads& grads) {
  const std::size_t L = features.rows();
  const std::size_t d = features.cols();
  const std::size_t K = bank.size();
  const double lam = opt.lambda_moe;
  const Vector zero_k(K, 0.0);

  for (std::size_t i = 0; i < L; ++i) {
    const auto x = features.row(i);
    const auto g = d_adapted.row(i);
    auto dx = grads.features.row(i);
    axpy(1.0 - lam, g, dx);

    // F_norm = u * |x| / (|u| + eps)
    const auto u = out.mixed.row(i);
    const double nu = norm(u);
    const double nx = norm(x);
    Vector du(d, 0.0);
    if (nu > 0.0 && lam != 0.0) {
      const double denom = nu + opt.eps;
      const double ug = dot(u, g) * lam;
      for (std::size_t j = 0; j < d; ++j) du[j] = lam * g[j] * nx / denom - ug * nx / (denom * denom * nu) * u[j];
      if (nx > 0.0) axpy(ug / (denom * nx), x, dx);
    }

    // u = sum_{n in top-k} w_n e_n
    Vector dweights(K, 0.0);
    std::vector<Vector> de(K, Vector(d, 0.0));
    for (auto n : out.routing.topk_indices[i]) {
      dweights[n] = dot(du, out.expert_outputs.at(i, n));
      axpy(out.routing.topk_weights(i, n), du, de[n]);
    }
    if (d_experts)
      for (std::size_t n = 0; n < K; ++n) axpy(1.0, d_experts->at(i, n), de[n]);

    // e_n = s * B_n * A_n * (mask .* x)
    for (std::size_t n = 0; n < K; ++n) {
      const auto& e = bank.experts[n];
      bool any = false;
      for (double v : de[n]) any = any || v != 0.0;
      if (!any) continue;
      const double s = e.scale();
      add_outer(grads.B[n], s, de[n], out.hidden[i][n]);
      Vector dh = matvec_t(e.B, de[n]);
      Vector dxt = matvec_t(e.A, dh);
      for (std::size_t j = 0; j < d; ++j) dx[j] += s * dxt[j] * out.masks[i][n][j];
    }

    const Vector dz = route_backward_row(out.routing.probs.row(i), out.routing.topk_weights.row(i),
                                         out.routing.topk_indices[i], dweights,
                                         d_probs ? d_probs->row(i) : std::span<const double>(zero_k));
    add_outer(grads.router, 1.0, dz, x);
    const Vector dxr = matvec_t(router.weight, dz);
    axpy(1.0, dxr, dx);
  }
}

}  // namespace moeclip
