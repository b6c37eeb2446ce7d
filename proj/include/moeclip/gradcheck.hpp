#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "moeclip/linalg.hpp"

namespace moeclip {

struct GradCheckReport {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t checked = 0;
  bool finite = true;
  bool passed = true;
};

/// Relative error with a floor on the denominator so that two near-zero values compare by absolute error.
inline double relative_error(double analytic, double numeric, double floor = 1e-6) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/**
 * Central finite differences on every coordinate of params, compared with
 * the analytic gradient. params is perturbed in place and restored exactly.
 */
inline GradCheckReport finite_diff_check(const std::function<double()>& loss, std::span<double> params,
                                         std::span<const double> analytic, double h = 1e-5, double tol = 1e-4,
                                         std::string name = {}, double floor = 1e-6) {
  detail::require_shape(params.size() == analytic.size(), "finite_diff_check: gradient size mismatch");
  GradCheckReport rep;
  rep.name = std::move(name);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double orig = params[i];
    params[i] = orig + h;
    const double lp = loss();
    params[i] = orig - h;
    const double lm = loss();
    params[i] = orig;
    if (!std::isfinite(lp) || !std::isfinite(lm)) {
      rep.finite = false;
      rep.passed = false;
      rep.worst_index = i;
      return rep;
    }
    const double numeric = (lp - lm) / (2.0 * h);
    const double err = relative_error(analytic[i], numeric, floor);
    ++rep.checked;
    if (rep.checked == 1 || err > rep.max_rel_error) {
      rep.max_rel_error = err;
      rep.worst_index = i;
      rep.worst_analytic = analytic[i];
      rep.worst_numeric = numeric;
    }
  }
  rep.passed = rep.max_rel_error <= tol;
  return rep;
}

}  // namespace moeclip
