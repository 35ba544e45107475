#pragma once

#include <qsmpc/core.hpp>

#include <string>
#include <string_view>

namespace qsmpc {

enum class CoefficientOrigin { initial, td_closed_form, critic_qp, allocation };

inline std::string_view to_string(CoefficientOrigin o) {
  switch (o) {
    case CoefficientOrigin::initial: return "initial";
    case CoefficientOrigin::td_closed_form: return "td_closed_form";
    case CoefficientOrigin::critic_qp: return "critic_qp";
    case CoefficientOrigin::allocation: return "allocation";
  }
  return "unknown";
}

/// Stage-cost weights c(0..N-1) of the shaped objective.
struct CoefficientVector {
  Vec values;
  CoefficientOrigin origin = CoefficientOrigin::initial;

  static CoefficientVector constant(Eigen::Index horizon, double value) {
    if (horizon < 1) throw InvalidArgument("CoefficientVector: horizon must be positive");
    if (!(value > 0.0) || !std::isfinite(value)) {
      throw InvalidArgument("CoefficientVector: coefficients must be positive and finite");
    }
    return {Vec::Constant(horizon, value), CoefficientOrigin::initial};
  }

  Eigen::Index size() const { return values.size(); }
  double operator[](Eigen::Index i) const { return values[i]; }

  bool valid() const {
    return values.size() > 0 && values.allFinite() && (values.array() > 0.0).all();
  }
};

}  // namespace qsmpc
