#pragma once

#include <stdexcept>
#include <string>

namespace moeclip {

/// Dimension or length mismatch between operands.
struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Argument outside the operation's mathematical domain (k out of range, even window, ...).
struct DomainError : std::domain_error {
  using std::domain_error::domain_error;
};

/// Requested more orthonormal rows than the ambient dimension allows.
struct RankError : std::domain_error {
  using std::domain_error::domain_error;
};

/// A metric is undefined for the given label set (no positives, no negatives).
struct UndefinedMetricError : std::domain_error {
  using std::domain_error::domain_error;
};

/// Loss became NaN/Inf during training.
struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Malformed config, checkpoint or dataset file.
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {
inline void require_shape(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}
inline void require_domain(bool ok, const std::string& what) {
  if (!ok) throw DomainError(what);
}
}  // namespace detail

}  // namespace moeclip
