#pragma once

#include <cmath>
#include <cstddef>

#include "moeclip/linalg.hpp"

namespace moeclip {

/// Side length of the square patch grid holding L patches.
inline std::size_t grid_side(std::size_t patches) {
  const auto side = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(patches))));
  detail::require_shape(side * side == patches, "patch count " + std::to_string(patches) + " is not a perfect square");
  return side;
}

namespace detail {
inline std::size_t clamp_index(std::ptrdiff_t i, std::size_t side) {
  if (i < 0) return 0;
  if (i >= static_cast<std::ptrdiff_t>(side)) return side - 1;
  return static_cast<std::size_t>(i);
}

inline void check_window(std::size_t s, std::size_t side) {
  require_domain(s >= 1 && s % 2 == 1, "paa: window size must be a positive odd integer");
  require_domain(s <= side, "paa: window size exceeds grid side");
}
}  // namespace detail

/**
 * Patch average aggregation: mean over the s x s window centred on each grid
 * cell. Out-of-grid taps read the nearest border cell (replicate padding),
 * which keeps constant fields fixed.
 */
inline Matrix paa_aggregate(const Matrix& features, std::size_t s) {
  const std::size_t side = grid_side(features.rows());
  detail::check_window(s, side);
  if (s == 1) return features;
  const auto half = static_cast<std::ptrdiff_t>(s / 2);
  const double w = 1.0 / static_cast<double>(s * s);
  Matrix out(features.rows(), features.cols());
  for (std::size_t h = 0; h < side; ++h)
    for (std::size_t c = 0; c < side; ++c) {
      auto dst = out.row(h * side + c);
      for (std::ptrdiff_t u = -half; u <= half; ++u)
        for (std::ptrdiff_t v = -half; v <= half; ++v) {
          const std::size_t hh = detail::clamp_index(static_cast<std::ptrdiff_t>(h) + u, side);
          const std::size_t cc = detail::clamp_index(static_cast<std::ptrdiff_t>(c) + v, side);
          axpy(w, features.row(hh * side + cc), dst);
        }
    }
  return out;
}

/// Adjoint of paa_aggregate.
inline Matrix paa_grad(const Matrix& upstream, std::size_t s) {
  const std::size_t side = grid_side(upstream.rows());
  detail::check_window(s, side);
  if (s == 1) return upstream;
  const auto half = static_cast<std::ptrdiff_t>(s / 2);
  const double w = 1.0 / static_cast<double>(s * s);
  Matrix out(upstream.rows(), upstream.cols());
  for (std::size_t h = 0; h < side; ++h)
    for (std::size_t c = 0; c < side; ++c) {
      const auto src = upstream.row(h * side + c);
      for (std::ptrdiff_t u = -half; u <= half; ++u)
        for (std::ptrdiff_t v = -half; v <= half; ++v) {
          const std::size_t hh = detail::clamp_index(static_cast<std::ptrdiff_t>(h) + u, side);
          const std::size_t cc = detail::clamp_index(static_cast<std::ptrdiff_t>(c) + v, side);
          axpy(w, src, out.row(hh * side + cc));
        }
    }
  return out;
}

}  // namespace moeclip
