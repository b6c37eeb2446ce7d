#pragma once

#include <algorithm>
#include <cstddef>
#include <numeric>
#include <vector>

#include "moeclip/linalg.hpp"

namespace moeclip {

/// Linear router: logits = W x, W is K x d.
struct RouterParams {
  Matrix weight;

  std::size_t num_experts() const { return weight.rows(); }
};

struct RoutingResult {
  Matrix probs;         // L x K softmax outputs
  Matrix topk_weights;  // L x K, renormalized over the selected experts, zero elsewhere
  std::vector<std::vector<std::size_t>> topk_indices;  // L rows of k indices, best first
};

/// Indices of the k largest entries, best first. Ties go to the lower index.
inline std::vector<std::size_t> topk_indices(std::span<const double> row, std::size_t k) {
  detail::require_domain(k >= 1 && k <= row.size(), "topk: k out of range");
  std::vector<std::size_t> idx(row.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return row[a] > row[b]; });
  idx.resize(k);
  return idx;
}

/// Keep the k largest scores, divide them by their sum, zero the rest.
inline Vector topk_renormalize(std::span<const double> row, std::size_t k) {
  const auto idx = topk_indices(row, k);
  double total = 0.0;
  for (auto i : idx) total += row[i];
  Vector out(row.size(), 0.0);
  for (auto i : idx) out[i] = row[i] / total;
  return out;
}

/// Row-wise softmax(W F_i).
inline Matrix route(const Matrix& features, const RouterParams& params) {
  detail::require_shape(features.cols() == params.weight.cols(), "route: feature dim != router input dim");
  detail::require_domain(params.num_experts() >= 1, "route: router has no experts");
  const Matrix logits = matmul_nt(features, params.weight);
  Matrix probs(features.rows(), params.num_experts());
  for (std::size_t i = 0; i < features.rows(); ++i) {
    const Vector p = softmax(logits.row(i));
    std::copy(p.begin(), p.end(), probs.row(i).begin());
  }
  return probs;
}

inline RoutingResult route_topk(const Matrix& features, const RouterParams& params, std::size_t k) {
  RoutingResult res;
  res.probs = route(features, params);
  res.topk_weights = Matrix(res.probs.rows(), res.probs.cols());
  res.topk_indices.reserve(res.probs.rows());
  for (std::size_t i = 0; i < res.probs.rows(); ++i) {
    auto idx = topk_indices(res.probs.row(i), k);
    double total = 0.0;
    for (auto n : idx) total += res.probs(i, n);
    for (auto n : idx) res.topk_weights(i, n) = res.probs(i, n) / total;
    res.topk_indices.push_back(std::move(idx));
  }
  return res;
}

/// Column sums of a probability matrix: the per-expert load.
inline Vector expert_load(const Matrix& probs) {
  Vector load(probs.cols(), 0.0);
  for (std::size_t i = 0; i < probs.rows(); ++i) axpy(1.0, probs.row(i), load);
  return load;
}

/// Squared coefficient of variation with population variance.
inline double cv_squared(std::span<const double> load, double eps = 1e-6) {
  const double n = static_cast<double>(load.size());
  const double mu = std::accumulate(load.begin(), load.end(), 0.0) / n;
  double var = 0.0;
  for (double b : load) var += (b - mu) * (b - mu);
  var /= n;
  return var / (mu * mu + eps);
}

/// Sum over levels of CV^2 of the expert load.
inline double balance_loss(const std::vector<Matrix>& probs_per_level, double eps = 1e-6) {
  detail::require_domain(!probs_per_level.empty(), "balance_loss: no levels");
  double total = 0.0;
  for (const auto& p : probs_per_level) total += cv_squared(expert_load(p), eps);
  return total;
}

/// d balance_loss / d probs, one L x K matrix per level.
inline std::vector<Matrix> balance_loss_grad(const std::vector<Matrix>& probs_per_level, double eps = 1e-6) {
  detail::require_domain(!probs_per_level.empty(), "balance_loss_grad: no levels");
  std::vector<Matrix> grads;
  grads.reserve(probs_per_level.size());
  for (const auto& p : probs_per_level) {
    const Vector load = expert_load(p);
    const double n = static_cast<double>(load.size());
    const double mu = std::accumulate(load.begin(), load.end(), 0.0) / n;
    double var = 0.0;
    for (double b : load) var += (b - mu) * (b - mu);
    var /= n;
    const double denom = mu * mu + eps;
    Vector dload(load.size());
    for (std::size_t j = 0; j < load.size(); ++j)
      dload[j] = (2.0 * (load[j] - mu) / n) / denom - var * (2.0 * mu / n) / (denom * denom);
    Matrix g(p.rows(), p.cols());
    for (std::size_t i = 0; i < p.rows(); ++i) std::copy(dload.begin(), dload.end(), g.row(i).begin());
    grads.push_back(std::move(g));
  }
  return grads;
}

/**
 * Backward of route_topk for one patch.
 *
 * The renormalized Top-k weights equal a softmax over the selected logits,
 * so their gradient flows only into those logits; the selection itself is
 * treated as constant. dprobs carries any direct gradient on the full
 * softmax probabilities (the balance loss). Returns dL/dlogits.
 */
inline Vector route_backward_row(std::span<const double> probs_row, std::span<const double> weights_row,
                                 const std::vector<std::size_t>& selected, std::span<const double> dweights_row,
                                 std::span<const double> dprobs_row) {
  Vector dz = softmax_backward(probs_row, dprobs_row);
  double wd = 0.0;
  for (auto n : selected) wd += weights_row[n] * dweights_row[n];
  for (auto n : selected) dz[n] += weights_row[n] * (dweights_row[n] - wd);
  return dz;
}

}  // namespace moeclip
