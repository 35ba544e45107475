#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <sstream>
#include <stdexcept>
#include <string>

namespace qsmpc {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

// Thrown for malformed inputs and violated preconditions.
class InvalidArgument : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// NaN/Inf in dynamics, non-convergent iterations, degenerate ratios.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bad configuration keys or values (CLI exit code 2).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Per-dimension closed interval [lower, upper].
struct Box {
  Vec lower;
  Vec upper;

  Box() = default;
  Box(Vec lo, Vec hi) : lower(std::move(lo)), upper(std::move(hi)) {
    if (lower.size() != upper.size()) {
      throw InvalidArgument("Box: bound dimensions differ");
    }
    for (Eigen::Index i = 0; i < lower.size(); ++i) {
      if (!(lower[i] <= upper[i])) {
        throw InvalidArgument("Box: lower bound exceeds upper bound");
      }
    }
  }

  static Box symmetric(Eigen::Index dim, double half_width) {
    return Box(Vec::Constant(dim, -half_width), Vec::Constant(dim, half_width));
  }

  Eigen::Index dim() const { return lower.size(); }

  bool contains(const Vec& x, double tol = 0.0) const {
    return ((x - lower).array() >= -tol).all() &&
           ((upper - x).array() >= -tol).all();
  }

  bool strictly_contains(const Vec& x) const {
    return ((x - lower).array() > 0.0).all() && ((upper - x).array() > 0.0).all();
  }

  Vec clamp(const Vec& x) const { return x.cwiseMax(lower).cwiseMin(upper); }

  // Smallest signed distance to the boundary; negative when outside.
  double margin(const Vec& x) const {
    return std::min((x - lower).minCoeff(), (upper - x).minCoeff());
  }
};

inline bool all_finite(const Vec& v) { return v.allFinite(); }

inline std::string to_string(const Vec& v) {
  std::ostringstream os;
  os.precision(17);
  os << '(';
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    if (i) os << ", ";
    os << v[i];
  }
  os << ')';
  return os.str();
}

}  // namespace qsmpc
