#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "moeclip/error.hpp"
#include "moeclip/rng.hpp"

namespace moeclip {

using Vector = std::vector<double>;

/// Dense row-major matrix of doubles.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, Vector data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    detail::require_shape(data_.size() == rows * cols, "Matrix: data length != rows*cols");
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  const Vector& values() const { return data_; }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  bool same_shape(const Matrix& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  Vector data_;
};

inline double dot(std::span<const double> a, std::span<const double> b) {
  detail::require_shape(a.size() == b.size(), "dot: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

/// y += alpha * x
inline void axpy(double alpha, std::span<const double> x, std::span<double> y) {
  detail::require_shape(x.size() == y.size(), "axpy: length mismatch");
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

inline double frobenius_norm(const Matrix& m) { return norm(m.data()); }

inline Matrix transpose(const Matrix& a) {
  Matrix t(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

/// A * B
inline Matrix matmul(const Matrix& a, const Matrix& b) {
  detail::require_shape(a.cols() == b.rows(), "matmul: inner dimension mismatch");
  Matrix c(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      for (std::size_t j = 0; j < b.cols(); ++j) c(i, j) += aik * b(k, j);
    }
  return c;
}

/// A * B^T
inline Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  detail::require_shape(a.cols() == b.cols(), "matmul_nt: inner dimension mismatch");
  Matrix c(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.rows(); ++j) c(i, j) = dot(a.row(i), b.row(j));
  return c;
}

/// A^T * B
inline Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  detail::require_shape(a.rows() == b.rows(), "matmul_tn: inner dimension mismatch");
  Matrix c(a.cols(), b.cols());
  for (std::size_t k = 0; k < a.rows(); ++k)
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const double aki = a(k, i);
      if (aki == 0.0) continue;
      for (std::size_t j = 0; j < b.cols(); ++j) c(i, j) += aki * b(k, j);
    }
  return c;
}

/// M * x
inline Vector matvec(const Matrix& m, std::span<const double> x) {
  detail::require_shape(m.cols() == x.size(), "matvec: dimension mismatch");
  Vector y(m.rows());
  for (std::size_t i = 0; i < m.rows(); ++i) y[i] = dot(m.row(i), x);
  return y;
}

/// M^T * x
inline Vector matvec_t(const Matrix& m, std::span<const double> x) {
  detail::require_shape(m.rows() == x.size(), "matvec_t: dimension mismatch");
  Vector y(m.cols(), 0.0);
  for (std::size_t i = 0; i < m.rows(); ++i) axpy(x[i], m.row(i), y);
  return y;
}

/// M += alpha * u v^T
inline void add_outer(Matrix& m, double alpha, std::span<const double> u, std::span<const double> v) {
  detail::require_shape(m.rows() == u.size() && m.cols() == v.size(), "add_outer: shape mismatch");
  for (std::size_t i = 0; i < u.size(); ++i) {
    const double s = alpha * u[i];
    if (s == 0.0) continue;
    auto r = m.row(i);
    for (std::size_t j = 0; j < v.size(); ++j) r[j] += s * v[j];
  }
}

inline Matrix random_normal(std::size_t rows, std::size_t cols, double stddev, SeededRng& rng) {
  Matrix m(rows, cols);
  for (auto& v : m.data()) v = stddev * rng.normal();
  return m;
}

/**
 * Random matrix with orthonormal rows.
 *
 * Draws C ~ N(0, I) of shape cols x rows, factors C = QR with Householder
 * reflections, and returns Q^T (rows x cols). The sign of each column of Q is
 * chosen so that diag(R) >= 0, which makes the result a function of the seed.
 */
inline Matrix qr_orthonormal_rows(std::size_t rows, std::size_t cols, SeededRng& rng) {
  if (rows > cols)
    throw RankError("qr_orthonormal_rows: requested " + std::to_string(rows) +
                    " orthonormal rows in dimension " + std::to_string(cols));
  const std::size_t m = cols;
  const std::size_t n = rows;
  Matrix a = random_normal(m, n, 1.0, rng);

  std::vector<Vector> reflectors;
  reflectors.reserve(n);
  Vector rdiag(n);
  for (std::size_t j = 0; j < n; ++j) {
    Vector v(m - j);
    for (std::size_t i = j; i < m; ++i) v[i - j] = a(i, j);
    const double alpha = norm(v);
    const double sign = v[0] >= 0.0 ? 1.0 : -1.0;
    v[0] += sign * alpha;
    const double vnorm = norm(v);
    if (vnorm > 0.0)
      for (auto& x : v) x /= vnorm;
    // A[j:, j:] -= 2 v (v^T A[j:, j:])
    for (std::size_t c = j; c < n; ++c) {
      double s = 0.0;
      for (std::size_t i = j; i < m; ++i) s += v[i - j] * a(i, c);
      for (std::size_t i = j; i < m; ++i) a(i, c) -= 2.0 * v[i - j] * s;
    }
    rdiag[j] = a(j, j);
    reflectors.push_back(std::move(v));
  }

  // Thin Q = H_0 H_1 ... H_{n-1} [I_n; 0], applied right to left.
  Matrix q(m, n);
  for (std::size_t j = 0; j < n; ++j) q(j, j) = 1.0;
  for (std::size_t jj = n; jj-- > 0;) {
    const Vector& v = reflectors[jj];
    for (std::size_t c = 0; c < n; ++c) {
      double s = 0.0;
      for (std::size_t i = jj; i < m; ++i) s += v[i - jj] * q(i, c);
      for (std::size_t i = jj; i < m; ++i) q(i, c) -= 2.0 * v[i - jj] * s;
    }
  }
  for (std::size_t c = 0; c < n; ++c)
    if (rdiag[c] < 0.0)
      for (std::size_t i = 0; i < m; ++i) q(i, c) = -q(i, c);
  return transpose(q);
}

/// Max-subtracted softmax.
inline Vector softmax(std::span<const double> v) {
  detail::require_domain(!v.empty(), "softmax: empty vector");
  const double mx = *std::max_element(v.begin(), v.end());
  Vector out(v.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) sum += (out[i] = std::exp(v[i] - mx));
  for (auto& x : out) x /= sum;
  return out;
}

/// Vector-Jacobian product of softmax: given p = softmax(z) and dL/dp, returns dL/dz.
inline Vector softmax_backward(std::span<const double> p, std::span<const double> dp) {
  const double pd = dot(p, dp);
  Vector dz(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) dz[i] = p[i] * (dp[i] - pd);
  return dz;
}

/// Cosine similarity; the norm product is floored at eps.
inline double cosine_sim(std::span<const double> u, std::span<const double> v, double eps = 1e-12) {
  detail::require_shape(u.size() == v.size(), "cosine_sim: length mismatch");
  const double denom = std::max(norm(u) * norm(v), eps);
  return std::clamp(dot(u, v) / denom, -1.0, 1.0);
}

/// Gradient of cosine_sim(u, v) with respect to u (unclamped branch).
inline Vector cosine_sim_grad_u(std::span<const double> u, std::span<const double> v, double eps = 1e-12) {
  detail::require_shape(u.size() == v.size(), "cosine_sim_grad_u: length mismatch");
  const double nu = norm(u);
  const double nv = norm(v);
  Vector g(u.size(), 0.0);
  if (nu * nv <= eps) {
    for (std::size_t i = 0; i < u.size(); ++i) g[i] = v[i] / eps;
    return g;
  }
  const double c = dot(u, v) / (nu * nv);
  for (std::size_t i = 0; i < u.size(); ++i) g[i] = v[i] / (nu * nv) - c * u[i] / (nu * nu);
  return g;
}

/// v / max(|v|, eps). Zero maps to zero; exact unit vectors are fixed points.
inline Vector l2_normalize(std::span<const double> v, double eps = 1e-6) {
  const double n = std::max(norm(v), eps);
  Vector out(v.begin(), v.end());
  for (auto& x : out) x /= n;
  return out;
}

/// Backward of l2_normalize: given input v, output vhat and dL/dvhat.
inline Vector l2_normalize_backward(std::span<const double> v, std::span<const double> vhat,
                                    std::span<const double> dvhat, double eps = 1e-6) {
  const double n = norm(v);
  Vector dv(v.size());
  if (n <= eps) {
    for (std::size_t i = 0; i < v.size(); ++i) dv[i] = dvhat[i] / eps;
    return dv;
  }
  const double radial = dot(vhat, dvhat);
  for (std::size_t i = 0; i < v.size(); ++i) dv[i] = (dvhat[i] - radial * vhat[i]) / n;
  return dv;
}

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }

inline double gelu_grad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

/// log(1 + exp(x)) without overflow.
inline double softplus(double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

/// Per-row layer normalization with affine gain/bias.
struct LayerNormCache {
  Matrix normalized;  // xhat
  Vector inv_std;     // per row
};

inline Matrix layer_norm(const Matrix& x, std::span<const double> gain, std::span<const double> bias,
                         double eps, LayerNormCache* cache = nullptr) {
  detail::require_shape(gain.size() == x.cols() && bias.size() == x.cols(), "layer_norm: affine size mismatch");
  const std::size_t d = x.cols();
  Matrix y(x.rows(), d);
  Matrix xhat(x.rows(), d);
  Vector inv_std(x.rows());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto r = x.row(i);
    const double mu = std::accumulate(r.begin(), r.end(), 0.0) / static_cast<double>(d);
    double var = 0.0;
    for (double v : r) var += (v - mu) * (v - mu);
    var /= static_cast<double>(d);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      xhat(i, j) = (r[j] - mu) * inv_std[i];
      y(i, j) = gain[j] * xhat(i, j) + bias[j];
    }
  }
  if (cache) *cache = {std::move(xhat), std::move(inv_std)};
  return y;
}

/// Backward of layer_norm. Accumulates into dgain/dbias, returns dL/dx.
inline Matrix layer_norm_backward(const Matrix& dy, const LayerNormCache& cache, std::span<const double> gain,
                                  std::span<double> dgain, std::span<double> dbias) {
  const std::size_t d = dy.cols();
  Matrix dx(dy.rows(), d);
  Vector g(d);
  for (std::size_t i = 0; i < dy.rows(); ++i) {
    double mean_g = 0.0;
    double mean_gx = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double xh = cache.normalized(i, j);
      dgain[j] += dy(i, j) * xh;
      dbias[j] += dy(i, j);
      g[j] = dy(i, j) * gain[j];
      mean_g += g[j];
      mean_gx += g[j] * xh;
    }
    mean_g /= static_cast<double>(d);
    mean_gx /= static_cast<double>(d);
    for (std::size_t j = 0; j < d; ++j)
      dx(i, j) = cache.inv_std[i] * (g[j] - mean_g - cache.normalized(i, j) * mean_gx);
  }
  return dx;
}

inline bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

}  // namespace moeclip
