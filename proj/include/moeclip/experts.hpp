#pragma once

#include <cstddef>
#include <numeric>
#include <vector>

#include "moeclip/linalg.hpp"

namespace moeclip {

/// One LoRA expert: E(x) = (alpha / rank) * B * A * dropout(x). A is frozen.
struct ExpertParams {
  Matrix A;  // rank x d
  Matrix B;  // d x rank
  double alpha = 16.0;
  std::size_t rank = 8;
  double dropout_p = 0.0;

  double scale() const { return alpha / static_cast<double>(rank); }
};

struct ExpertBank {
  std::vector<ExpertParams> experts;
  std::vector<std::size_t> subspace_dims;  // d_n, summing to d

  std::size_t size() const { return experts.size(); }
  std::size_t dim() const { return experts.empty() ? 0 : experts.front().A.cols(); }
};

/// L x K x d tensor of per-patch, per-expert outputs.
class ExpertOutputs {
 public:
  ExpertOutputs() = default;
  ExpertOutputs(std::size_t patches, std::size_t experts, std::size_t dim)
      : patches_(patches), experts_(experts), dim_(dim), data_(patches * experts * dim, 0.0) {}

  std::size_t patches() const { return patches_; }
  std::size_t experts() const { return experts_; }
  std::size_t dim() const { return dim_; }

  std::span<double> at(std::size_t i, std::size_t n) { return {data_.data() + (i * experts_ + n) * dim_, dim_}; }
  std::span<const double> at(std::size_t i, std::size_t n) const {
    return {data_.data() + (i * experts_ + n) * dim_, dim_};
  }
  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }

  friend bool operator==(const ExpertOutputs&, const ExpertOutputs&) = default;

 private:
  std::size_t patches_ = 0;
  std::size_t experts_ = 0;
  std::size_t dim_ = 0;
  Vector data_;
};

/// Split d into K contiguous parts; the first d mod K parts get one extra dimension.
inline std::vector<std::size_t> partition_dims(std::size_t d, std::size_t K) {
  detail::require_domain(K >= 1 && K <= d, "partition_dims: need 1 <= K <= d");
  std::vector<std::size_t> dims(K, d / K);
  for (std::size_t n = 0; n < d % K; ++n) ++dims[n];
  return dims;
}

inline Matrix init_up_projection(std::size_t d, std::size_t r, SeededRng& rng) { return random_normal(d, r, 0.01, rng); }

/**
 * Frozen orthogonal feature separation.
 *
 * Expert n reads only its own contiguous slice of the input: A_n is zero
 * outside that slice and holds a QR-orthonormal r x d_n block inside it, so
 * A_n A_m^T is exactly zero for n != m.
 */
inline ExpertBank fofs_init(std::size_t d, std::size_t K, std::size_t r, SeededRng& rng, double alpha = 16.0,
                            double dropout_p = 0.0) {
  ExpertBank bank;
  bank.subspace_dims = partition_dims(d, K);
  const std::size_t min_dim = *std::min_element(bank.subspace_dims.begin(), bank.subspace_dims.end());
  if (r > min_dim)
    throw RankError("fofs_init: rank " + std::to_string(r) + " exceeds smallest subspace " + std::to_string(min_dim));
  std::size_t offset = 0;
  for (std::size_t n = 0; n < K; ++n) {
    const std::size_t dn = bank.subspace_dims[n];
    const Matrix q = qr_orthonormal_rows(r, dn, rng);
    ExpertParams e;
    e.A = Matrix(r, d);
    for (std::size_t a = 0; a < r; ++a)
      for (std::size_t c = 0; c < dn; ++c) e.A(a, offset + c) = q(a, c);
    e.B = init_up_projection(d, r, rng);
    e.alpha = alpha;
    e.rank = r;
    e.dropout_p = dropout_p;
    bank.experts.push_back(std::move(e));
    offset += dn;
  }
  return bank;
}

/// Ablation counterpart of fofs_init: every A_n is a dense orthonormal r x d matrix over the full input.
inline ExpertBank dense_init(std::size_t d, std::size_t K, std::size_t r, SeededRng& rng, double alpha = 16.0,
                             double dropout_p = 0.0) {
  ExpertBank bank;
  bank.subspace_dims.assign(K, d);
  for (std::size_t n = 0; n < K; ++n) {
    ExpertParams e;
    e.A = qr_orthonormal_rows(r, d, rng);
    e.B = init_up_projection(d, r, rng);
    e.alpha = alpha;
    e.rank = r;
    e.dropout_p = dropout_p;
    bank.experts.push_back(std::move(e));
  }
  return bank;
}

/// Inverted dropout mask (entries 0 or 1/(1-p)); all ones when not training.
inline Vector dropout_mask(std::size_t d, double p, bool training, SeededRng& rng) {
  Vector mask(d, 1.0);
  if (!training || p <= 0.0) return mask;
  const double keep = 1.0 / (1.0 - p);
  for (auto& m : mask) m = rng.bernoulli(p) ? 0.0 : keep;
  return mask;
}

/// Forward with an explicit mask; also returns the rank-space activation A * (mask .* x).
inline Vector expert_forward_masked(std::span<const double> x, const ExpertParams& e, std::span<const double> mask,
                                    Vector* hidden = nullptr) {
  detail::require_shape(x.size() == e.A.cols() && mask.size() == x.size(), "expert_forward: input dim mismatch");
  Vector xt(x.begin(), x.end());
  for (std::size_t j = 0; j < xt.size(); ++j) xt[j] *= mask[j];
  Vector h = matvec(e.A, xt);
  Vector y = matvec(e.B, h);
  const double s = e.scale();
  for (auto& v : y) v *= s;
  if (hidden) *hidden = std::move(h);
  return y;
}

inline Vector expert_forward(std::span<const double> x, const ExpertParams& e, bool training, SeededRng& rng) {
  const Vector mask = dropout_mask(x.size(), e.dropout_p, training, rng);
  return expert_forward_masked(x, e, mask);
}

/// Ideal simplex-ETF Gram entry.
inline double etf_ideal(std::size_t n, std::size_t m, std::size_t K) {
  return n == m ? 1.0 : -1.0 / static_cast<double>(K - 1);
}

/// (1 / (L K^2)) sum_i |G_i - G_ideal|_F^2 with G_i the Gram of normalized expert outputs at patch i.
inline double etf_loss(const ExpertOutputs& E, double eps = 1e-6) {
  const std::size_t K = E.experts();
  detail::require_domain(K >= 2, "etf_loss: need at least two experts");
  const std::size_t L = E.patches();
  double total = 0.0;
  std::vector<Vector> hat(K);
  for (std::size_t i = 0; i < L; ++i) {
    for (std::size_t n = 0; n < K; ++n) hat[n] = l2_normalize(E.at(i, n), eps);
    for (std::size_t n = 0; n < K; ++n)
      for (std::size_t m = 0; m < K; ++m) {
        const double diff = dot(hat[n], hat[m]) - etf_ideal(n, m, K);
        total += diff * diff;
      }
  }
  return total / (static_cast<double>(L) * static_cast<double>(K * K));
}

inline ExpertOutputs etf_loss_grad(const ExpertOutputs& E, double eps = 1e-6) {
  const std::size_t K = E.experts();
  detail::require_domain(K >= 2, "etf_loss_grad: need at least two experts");
  const std::size_t L = E.patches();
  const double scale = 1.0 / (static_cast<double>(L) * static_cast<double>(K * K));
  ExpertOutputs grad(L, K, E.dim());
  std::vector<Vector> hat(K);
  for (std::size_t i = 0; i < L; ++i) {
    for (std::size_t n = 0; n < K; ++n) hat[n] = l2_normalize(E.at(i, n), eps);
    for (std::size_t n = 0; n < K; ++n) {
      // G is symmetric, so dL/dhat_n = 4 * scale * sum_m (G_nm - ideal_nm) hat_m.
      Vector dhat(E.dim(), 0.0);
      for (std::size_t m = 0; m < K; ++m) {
        const double diff = dot(hat[n], hat[m]) - etf_ideal(n, m, K);
        axpy(4.0 * scale * diff, hat[m], dhat);
      }
      const Vector de = l2_normalize_backward(E.at(i, n), hat[n], dhat, eps);
      std::copy(de.begin(), de.end(), grad.at(i, n).begin());
    }
  }
  return grad;
}

}  // namespace moeclip
