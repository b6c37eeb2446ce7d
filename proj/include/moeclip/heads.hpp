#pragma once

#include <cstddef>
#include <vector>

#include "moeclip/linalg.hpp"
#include "moeclip/paa.hpp"

namespace moeclip {

/// Frozen unit-norm text directions for the normal and anomalous class.
struct TextAnchors {
  Vector normal;
  Vector anomaly;
};

/// Depthwise-separable image head: LN -> depthwise conv over patches -> GELU -> pointwise -> mean.
struct HeadParams {
  Matrix dw;  // d x kernel_width, per-channel taps
  Matrix pw;  // d x d
  Vector ln_gain;
  Vector ln_bias;

  static HeadParams zeros_like(const HeadParams& p) {
    return {Matrix(p.dw.rows(), p.dw.cols()), Matrix(p.pw.rows(), p.pw.cols()), Vector(p.ln_gain.size(), 0.0),
            Vector(p.ln_bias.size(), 0.0)};
  }
};

inline constexpr double kLayerNormEps = 1e-5;
inline constexpr double kCosineEps = 1e-12;

/// V = F proj^T
inline Matrix project(const Matrix& features, const Matrix& proj) {
  detail::require_shape(features.cols() == proj.cols(), "project: feature dim != projection input dim");
  return matmul_nt(features, proj);
}

/// Accumulates dL/dproj and returns dL/dF.
inline Matrix project_backward(const Matrix& features, const Matrix& proj, const Matrix& dv, Matrix& dproj) {
  const Matrix g = matmul_tn(dv, features);
  axpy(1.0, g.data(), dproj.data());
  return matmul(dv, proj);
}

/// Source taps for one output axis of a half-pixel-centred bilinear resize.
struct AxisTaps {
  std::vector<std::size_t> lo, hi;
  Vector frac;
};

inline AxisTaps bilinear_taps(std::size_t in, std::size_t out) {
  AxisTaps t;
  t.lo.resize(out);
  t.hi.resize(out);
  t.frac.resize(out);
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * ratio - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    const auto lo = static_cast<std::size_t>(std::floor(src));
    t.lo[o] = lo;
    t.hi[o] = std::min(lo + 1, in - 1);
    t.frac[o] = src - static_cast<double>(lo);
  }
  return t;
}

/// Resize a row-major side x side grid to out_h x out_w.
inline Vector bilinear_resize(std::span<const double> grid, std::size_t side, std::size_t out_h, std::size_t out_w) {
  detail::require_shape(grid.size() == side * side, "bilinear_resize: grid size mismatch");
  const AxisTaps ty = bilinear_taps(side, out_h);
  const AxisTaps tx = bilinear_taps(side, out_w);
  Vector out(out_h * out_w);
  for (std::size_t y = 0; y < out_h; ++y)
    for (std::size_t x = 0; x < out_w; ++x) {
      const double fy = ty.frac[y], fx = tx.frac[x];
      const double top = (1 - fx) * grid[ty.lo[y] * side + tx.lo[x]] + fx * grid[ty.lo[y] * side + tx.hi[x]];
      const double bot = (1 - fx) * grid[ty.hi[y] * side + tx.lo[x]] + fx * grid[ty.hi[y] * side + tx.hi[x]];
      out[y * out_w + x] = (1 - fy) * top + fy * bot;
    }
  return out;
}

/// Adjoint of bilinear_resize.
inline Vector bilinear_resize_adjoint(std::span<const double> upstream, std::size_t side, std::size_t out_h,
                                      std::size_t out_w) {
  const AxisTaps ty = bilinear_taps(side, out_h);
  const AxisTaps tx = bilinear_taps(side, out_w);
  Vector grid(side * side, 0.0);
  for (std::size_t y = 0; y < out_h; ++y)
    for (std::size_t x = 0; x < out_w; ++x) {
      const double g = upstream[y * out_w + x];
      const double fy = ty.frac[y], fx = tx.frac[x];
      grid[ty.lo[y] * side + tx.lo[x]] += g * (1 - fy) * (1 - fx);
      grid[ty.lo[y] * side + tx.hi[x]] += g * (1 - fy) * fx;
      grid[ty.hi[y] * side + tx.lo[x]] += g * fy * (1 - fx);
      grid[ty.hi[y] * side + tx.hi[x]] += g * fy * fx;
    }
  return grid;
}

/// Two-channel pixel map; normal[p] + anomaly[p] == 1.
struct AnomalyMap {
  std::size_t height = 0;
  std::size_t width = 0;
  Vector normal;
  Vector anomaly;

  friend bool operator==(const AnomalyMap&, const AnomalyMap&) = default;
};

/**
 * Per-patch cosine to each anchor divided by tau, bilinearly resized to the
 * output resolution, then a two-way softmax per pixel.
 */
inline AnomalyMap anomaly_map(const Matrix& v, const TextAnchors& anchors, double tau, std::size_t out_h,
                              std::size_t out_w) {
  const std::size_t side = grid_side(v.rows());
  detail::require_domain(tau > 0.0, "anomaly_map: tau must be positive");
  Vector zn(v.rows()), za(v.rows());
  for (std::size_t i = 0; i < v.rows(); ++i) {
    zn[i] = cosine_sim(v.row(i), anchors.normal, kCosineEps) / tau;
    za[i] = cosine_sim(v.row(i), anchors.anomaly, kCosineEps) / tau;
  }
  const Vector pn = bilinear_resize(zn, side, out_h, out_w);
  const Vector pa = bilinear_resize(za, side, out_h, out_w);
  AnomalyMap m{out_h, out_w, Vector(out_h * out_w), Vector(out_h * out_w)};
  for (std::size_t p = 0; p < pn.size(); ++p) {
    const double pair[2] = {pn[p], pa[p]};
    const Vector s = softmax(pair);
    m.normal[p] = s[0];
    m.anomaly[p] = s[1];
  }
  return m;
}

/// Given dL/d(anomaly channel) per pixel, returns dL/dV. The normal channel is 1 - anomaly.
inline Matrix anomaly_map_backward(const Matrix& v, const TextAnchors& anchors, double tau, const AnomalyMap& map,
                                   std::span<const double> d_anomaly) {
  const std::size_t side = grid_side(v.rows());
  // anomaly = sigmoid(za - zn) after resizing.
  Vector dz(d_anomaly.size());
  for (std::size_t p = 0; p < dz.size(); ++p) dz[p] = d_anomaly[p] * map.anomaly[p] * map.normal[p];
  const Vector dgrid = bilinear_resize_adjoint(dz, side, map.height, map.width);
  Matrix dv(v.rows(), v.cols());
  for (std::size_t i = 0; i < v.rows(); ++i) {
    const double g = dgrid[i] / tau;
    if (g == 0.0) continue;
    const Vector ga = cosine_sim_grad_u(v.row(i), anchors.anomaly, kCosineEps);
    const Vector gn = cosine_sim_grad_u(v.row(i), anchors.normal, kCosineEps);
    auto r = dv.row(i);
    axpy(g, ga, r);
    axpy(-g, gn, r);
  }
  return dv;
}

struct HeadCache {
  LayerNormCache ln;
  Matrix conv;    // depthwise output (GELU input)
  Matrix hidden;  // GELU output
};

namespace detail {
inline void check_kernel(const HeadParams& p, std::size_t d) {
  require_domain(p.dw.cols() % 2 == 1, "depthwise_head: kernel width must be odd");
  require_shape(p.dw.rows() == d && p.pw.rows() == d && p.pw.cols() == d, "depthwise_head: parameter shape mismatch");
}
}  // namespace detail

/// mean_i PwConv(GELU(DwConv(LN(F))))_i, convolving along the patch sequence with replicate padding.
inline Vector depthwise_head(const Matrix& features, const HeadParams& params, HeadCache* cache = nullptr) {
  const std::size_t L = features.rows();
  const std::size_t d = features.cols();
  detail::check_kernel(params, d);
  HeadCache local;
  HeadCache& c = cache ? *cache : local;
  const Matrix normed = layer_norm(features, params.ln_gain, params.ln_bias, kLayerNormEps, &c.ln);
  const auto half = static_cast<std::ptrdiff_t>(params.dw.cols() / 2);
  c.conv = Matrix(L, d);
  for (std::size_t i = 0; i < L; ++i)
    for (std::size_t t = 0; t < params.dw.cols(); ++t) {
      const std::size_t src = detail::clamp_index(static_cast<std::ptrdiff_t>(i + t) - half, L);
      for (std::size_t ch = 0; ch < d; ++ch) c.conv(i, ch) += params.dw(ch, t) * normed(src, ch);
    }
  c.hidden = Matrix(L, d);
  Vector pooled(d, 0.0);
  for (std::size_t i = 0; i < L; ++i)
    for (std::size_t ch = 0; ch < d; ++ch) pooled[ch] += (c.hidden(i, ch) = gelu(c.conv(i, ch)));
  for (auto& v : pooled) v /= static_cast<double>(L);
  // Pointwise conv commutes with the mean.
  return matvec(params.pw, pooled);
}

/// Accumulates head parameter gradients and returns dL/dF.
inline Matrix depthwise_head_backward(const Matrix& features, const HeadParams& params, const HeadCache& cache,
                                      std::span<const double> dv, HeadParams& grads) {
  const std::size_t L = features.rows();
  const std::size_t d = features.cols();
  Vector pooled(d, 0.0);
  for (std::size_t i = 0; i < L; ++i) axpy(1.0 / static_cast<double>(L), cache.hidden.row(i), pooled);
  add_outer(grads.pw, 1.0, dv, pooled);
  const Vector dpooled = matvec_t(params.pw, dv);

  Matrix dconv(L, d);
  for (std::size_t i = 0; i < L; ++i)
    for (std::size_t ch = 0; ch < d; ++ch)
      dconv(i, ch) = dpooled[ch] / static_cast<double>(L) * gelu_grad(cache.conv(i, ch));

  // Rebuild LN output from the cache for the kernel gradient.
  Matrix normed(L, d);
  for (std::size_t i = 0; i < L; ++i)
    for (std::size_t ch = 0; ch < d; ++ch)
      normed(i, ch) = params.ln_gain[ch] * cache.ln.normalized(i, ch) + params.ln_bias[ch];

  const auto half = static_cast<std::ptrdiff_t>(params.dw.cols() / 2);
  Matrix dnormed(L, d);
  for (std::size_t i = 0; i < L; ++i)
    for (std::size_t t = 0; t < params.dw.cols(); ++t) {
      const std::size_t src = detail::clamp_index(static_cast<std::ptrdiff_t>(i + t) - half, L);
      for (std::size_t ch = 0; ch < d; ++ch) {
        grads.dw(ch, t) += dconv(i, ch) * normed(src, ch);
        dnormed(src, ch) += params.dw(ch, t) * dconv(i, ch);
      }
    }
  return layer_norm_backward(dnormed, cache.ln, params.ln_gain, grads.ln_gain, grads.ln_bias);
}

struct ScorePair {
  double anomaly = 0.5;  // S_A, used as the image score
  double normal = 0.5;
  double logit = 0.0;    // (cos_A - cos_N) / tau
};

/// Two-way softmax over [cos(V, T_A), cos(V, T_N)] / tau; index 0 is the anomaly class.
inline ScorePair anomaly_score(std::span<const double> v, const TextAnchors& anchors, double tau) {
  detail::require_domain(tau > 0.0, "anomaly_score: tau must be positive");
  const double ca = cosine_sim(v, anchors.anomaly, kCosineEps);
  const double cn = cosine_sim(v, anchors.normal, kCosineEps);
  const double raw[2] = {ca / tau, cn / tau};
  const Vector s = softmax(raw);
  return {s[0], s[1], raw[0] - raw[1]};
}

/// dL/dV from dL/dlogit, where logit = (cos_A - cos_N) / tau.
inline Vector anomaly_score_backward(std::span<const double> v, const TextAnchors& anchors, double tau,
                                     double dlogit) {
  Vector g = cosine_sim_grad_u(v, anchors.anomaly, kCosineEps);
  const Vector gn = cosine_sim_grad_u(v, anchors.normal, kCosineEps);
  for (std::size_t j = 0; j < g.size(); ++j) g[j] = (g[j] - gn[j]) * dlogit / tau;
  return g;
}

}  // namespace moeclip
