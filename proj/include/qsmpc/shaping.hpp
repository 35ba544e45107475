#pragma once

#include <qsmpc/coefficients.hpp>
#include <qsmpc/core.hpp>
#include <qsmpc/dynamics.hpp>
#include <qsmpc/ingredients.hpp>
#include <qsmpc/ocp.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace qsmpc {

inline constexpr double kCoefficientCap = 1e6;
inline constexpr double kCoefficientFloor = 1e-14;
inline constexpr double kDegenerateCost = 1e-14;
inline constexpr double kMembershipTolerance = 1e-10;

enum class UpdateRule { td_constrained, allocation, frozen };

inline std::string_view to_string(UpdateRule r) {
  switch (r) {
    case UpdateRule::td_constrained: return "td_constrained";
    case UpdateRule::allocation: return "allocation";
    case UpdateRule::frozen: return "frozen";
  }
  return "unknown";
}

inline UpdateRule parse_update_rule(std::string_view s) {
  if (s == "td_constrained") return UpdateRule::td_constrained;
  if (s == "allocation") return UpdateRule::allocation;
  if (s == "frozen") return UpdateRule::frozen;
  throw InvalidArgument("unknown update rule '" + std::string(s) + "'");
}

/// Time-k quantities entering the W_k inequality for the time-(k+1) coefficients.
struct StabilityConstraintData {
  Vec stage_costs;  // l(x*(i), u*(i)) for i = 1..N-1
  CoefficientVector prev_coeffs;
  Vec terminal_state;
  double terminal_drop = 0.0;   // F(x*(N)) - F(f(x*(N), mu_F(x*(N))))
  double terminal_stage = 0.0;  // l(x*(N), mu_F(x*(N)))

  int horizon() const { return static_cast<int>(prev_coeffs.size()); }
};

struct UpdateFlags {
  bool capped = false;          // some value clipped at the cap
  bool floored = false;         // some value sits on the positivity floor
  bool degenerate = false;      // some index carried over for zero stage cost
  bool constraint_active = false;
  bool fallback = false;        // critic infeasible, allocation used instead
  bool outside_w = false;       // result violates W_k beyond tolerance

  std::string describe() const {
    std::string s;
    auto add = [&](bool on, const char* name) {
      if (!on) return;
      if (!s.empty()) s += '|';
      s += name;
    };
    add(capped, "capped");
    add(floored, "floored");
    add(degenerate, "degenerate");
    add(constraint_active, "active");
    add(fallback, "fallback");
    add(outside_w, "outside_w");
    return s;
  }
};

struct CoefficientUpdate {
  CoefficientVector coefficients;
  UpdateFlags flags;
  double slack = 0.0;  // w_membership of the result; NaN when not evaluated
};

inline StabilityConstraintData build_constraint_data(const OcpSolution& solution,
                                                     const CoefficientVector& coeffs,
                                                     const SystemModel& model,
                                                     const TerminalIngredients& terminal,
                                                     const StageCost& cost) {
  if (!solution.converged) throw InvalidArgument("build_constraint_data: solution not converged");
  const int N = static_cast<int>(solution.controls.size());
  if (coeffs.size() != N || static_cast<int>(solution.states.size()) != N + 1) {
    throw InvalidArgument("build_constraint_data: horizon mismatch");
  }
  StabilityConstraintData d;
  d.stage_costs.resize(N - 1);
  for (int i = 1; i < N; ++i) {
    d.stage_costs[i - 1] = cost.evaluate(solution.states[i], solution.controls[i]);
  }
  d.prev_coeffs = coeffs;
  d.terminal_state = solution.states[N];
  const Vec u = terminal.local_control(d.terminal_state);
  d.terminal_drop = terminal.cost(d.terminal_state) - terminal.cost(model.step(d.terminal_state, u));
  d.terminal_stage = cost.evaluate(d.terminal_state, u);
  return d;
}

/// Left-hand side of the W_k inequality; the candidate is a member iff the
/// result is <= 1e-10.
inline double w_membership(const CoefficientVector& candidate, const StabilityConstraintData& d) {
  const int N = d.horizon();
  if (candidate.size() != N) throw InvalidArgument("w_membership: length mismatch");
  double s = 0.0;
  for (int i = 1; i < N; ++i) s += (candidate[i - 1] - d.prev_coeffs[i]) * d.stage_costs[i - 1];
  return s - d.terminal_drop + candidate[N - 1] * d.terminal_stage;
}

namespace detail {

// Unconstrained TD target 1 + c * l(f(x, u), a*) / l(x, u); nullopt when l(x, u)
// is degenerate.
inline std::optional<double> td_target(double c, const Vec& x, const Vec& u,
                                       const SystemModel& model, const StageCost& cost,
                                       double* stage = nullptr) {
  const double l = cost.evaluate(x, u);
  if (stage) *stage = l;
  if (!(l > kDegenerateCost)) return std::nullopt;
  const Vec next = model.step(x, u);
  const double l_next = cost.evaluate(next, cost.control_minimizer_at(next));
  return 1.0 + c * l_next / l;
}

}  // namespace detail

/// Per-index closed-form TD update, without the stability constraint.
inline CoefficientUpdate td_update_closed_form(const CoefficientVector& coeffs,
                                               const std::vector<Vec>& states,
                                               const std::vector<Vec>& controls,
                                               const SystemModel& model, const StageCost& cost) {
  const int N = static_cast<int>(coeffs.size());
  if (static_cast<int>(controls.size()) < N || static_cast<int>(states.size()) < N) {
    throw InvalidArgument("td_update_closed_form: trajectory shorter than horizon");
  }
  CoefficientUpdate out;
  out.coefficients = coeffs;
  out.coefficients.origin = CoefficientOrigin::td_closed_form;
  out.slack = std::numeric_limits<double>::quiet_NaN();
  for (int i = 0; i < N; ++i) {
    const std::optional<double> t = detail::td_target(coeffs[i], states[i], controls[i], model, cost);
    if (!t) {
      out.flags.degenerate = true;
      continue;
    }
    double v = *t;
    if (v > kCoefficientCap) {
      v = kCoefficientCap;
      out.flags.capped = true;
    }
    out.coefficients.values[i] = v;
  }
  return out;
}

/// Shift the previous coefficients and append the terminal decay ratio.
inline CoefficientUpdate allocation_update(const CoefficientVector& coeffs,
                                           const StabilityConstraintData& d) {
  const int N = static_cast<int>(coeffs.size());
  if (d.horizon() != N) throw InvalidArgument("allocation_update: length mismatch");
  CoefficientUpdate out;
  out.coefficients.values.resize(N);
  out.coefficients.origin = CoefficientOrigin::allocation;
  for (int i = 1; i < N; ++i) out.coefficients.values[i - 1] = coeffs[i];
  double last = coeffs[N - 1];
  if (d.terminal_stage > kDegenerateCost) {
    last = d.terminal_drop / d.terminal_stage;
  } else {
    out.flags.degenerate = true;
  }
  if (last > kCoefficientCap) {
    last = kCoefficientCap;
    out.flags.capped = true;
  }
  if (!(last >= kCoefficientFloor)) {
    last = kCoefficientFloor;
    out.flags.floored = true;
  }
  out.coefficients.values[N - 1] = last;
  out.slack = w_membership(out.coefficients, d);
  out.flags.outside_w = out.slack > kMembershipTolerance;
  return out;
}

/// min sum_i w_i (C_i - t_i)^2  s.t.  a'C <= b,  lb <= C <= ub, all separable.
/// Returns nullopt when even C = lb violates the linear constraint.
struct SeparableQpResult {
  Vec x;
  double multiplier = 0.0;
};

inline std::optional<SeparableQpResult> solve_separable_qp(const Vec& w, const Vec& t, const Vec& a,
                                                           double b, const Vec& lb, const Vec& ub) {
  const Eigen::Index n = w.size();
  auto at = [&](double lambda) {
    Vec x(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      x[i] = std::clamp(t[i] - lambda * a[i] / (2.0 * w[i]), lb[i], ub[i]);
    }
    return x;
  };
  SeparableQpResult r;
  r.x = at(0.0);
  if (a.dot(r.x) <= b) return r;
  if (a.dot(lb) > b) return std::nullopt;

  // a'x(lambda) is continuous and nonincreasing; bracket and bisect, then
  // re-solve the multiplier exactly on the final free set.
  double lo = 0.0, hi = 1.0;
  while (a.dot(at(hi)) > b) {
    lo = hi;
    hi *= 2.0;
    if (!std::isfinite(hi)) return std::nullopt;
  }
  for (int it = 0; it < 200 && hi - lo > 1e-15 * hi; ++it) {
    const double mid = 0.5 * (lo + hi);
    (a.dot(at(mid)) > b ? lo : hi) = mid;
  }
  double lambda = hi;
  const Vec probe = at(lambda);
  double fixed = 0.0, num = 0.0, den = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double free_value = t[i] - lambda * a[i] / (2.0 * w[i]);
    if (a[i] != 0.0 && free_value > lb[i] && free_value < ub[i]) {
      num += a[i] * t[i];
      den += a[i] * a[i] / (2.0 * w[i]);
    } else {
      fixed += a[i] * probe[i];
    }
  }
  if (den > 0.0) {
    const double exact = (num + fixed - b) / den;
    const Vec refined = at(exact);
    if (exact >= 0.0 && a.dot(refined) <= b + 1e-12 * (1.0 + std::abs(b))) lambda = exact;
  }
  r.x = at(lambda);
  r.multiplier = lambda;
  return r;
}

/// Critic step: TD least squares over all N coefficients under W_k, the
/// positivity floor, the cap and the optional lower bound.
inline CoefficientUpdate critic_update(const CoefficientVector& coeffs,
                                       const std::vector<Vec>& states,
                                       const std::vector<Vec>& controls,
                                       const StabilityConstraintData& d, const SystemModel& model,
                                       const StageCost& cost,
                                       std::optional<double> lower_bound = std::nullopt) {
  const int N = static_cast<int>(coeffs.size());
  if (d.horizon() != N) throw InvalidArgument("critic_update: length mismatch");
  if (lower_bound && !(*lower_bound > 0.0 && *lower_bound <= kCoefficientCap)) {
    throw InvalidArgument("critic_update: lower bound must lie in (0, 1e6]");
  }
  if (static_cast<int>(controls.size()) < N || static_cast<int>(states.size()) < N) {
    throw InvalidArgument("critic_update: trajectory shorter than horizon");
  }
  const double floor = std::max(kCoefficientFloor, lower_bound.value_or(0.0));

  CoefficientUpdate out;
  Vec w(N), t(N), a(N);
  bool any_weight = false;
  for (int i = 0; i < N; ++i) {
    double l = 0.0;
    const std::optional<double> target =
        detail::td_target(coeffs[i], states[i], controls[i], model, cost, &l);
    if (target) {
      w[i] = l * l;
      t[i] = *target;
      any_weight = true;
    } else {
      w[i] = 0.0;
      t[i] = coeffs[i];
      out.flags.degenerate = true;
    }
    a[i] = i + 1 < N ? d.stage_costs[i] : d.terminal_stage;
  }
  if (!any_weight) {
    out.coefficients = coeffs;
    out.coefficients.origin = CoefficientOrigin::critic_qp;
    out.slack = w_membership(out.coefficients, d);
    out.flags.outside_w = out.slack > kMembershipTolerance;
    return out;
  }
  // Degenerate indices keep their previous value unless W_k forces a change.
  const double reg = 1e-12 * std::max(1.0, w.maxCoeff());
  for (int i = 0; i < N; ++i) {
    if (w[i] == 0.0) w[i] = reg;
  }
  const double b = d.terminal_drop + [&] {
    double s = 0.0;
    for (int i = 1; i < N; ++i) s += d.prev_coeffs[i] * d.stage_costs[i - 1];
    return s;
  }();
  const Vec lb = Vec::Constant(N, floor);
  const Vec ub = Vec::Constant(N, kCoefficientCap);
  for (int i = 0; i < N; ++i) {
    if (t[i] > kCoefficientCap) out.flags.capped = true;
  }

  const std::optional<SeparableQpResult> qp = solve_separable_qp(w, t, a, b, lb, ub);
  if (!qp) {
    CoefficientUpdate fb = allocation_update(coeffs, d);
    fb.flags.fallback = true;
    return fb;
  }
  out.coefficients.values = qp->x;
  out.coefficients.origin = CoefficientOrigin::critic_qp;
  out.flags.constraint_active = qp->multiplier > 0.0;
  for (int i = 0; i < N; ++i) {
    if (out.coefficients.values[i] <= kCoefficientFloor) out.flags.floored = true;
  }
  out.slack = w_membership(out.coefficients, d);
  out.flags.outside_w = out.slack > kMembershipTolerance;
  return out;
}

/// Applies `rule` to the time-k solution and returns the time-(k+1) coefficients.
inline CoefficientUpdate update_coefficients(UpdateRule rule, const CoefficientVector& coeffs,
                                             const OcpSolution& solution, const SystemModel& model,
                                             const StageCost& cost,
                                             const TerminalIngredients& terminal,
                                             std::optional<double> lower_bound = std::nullopt) {
  const StabilityConstraintData d = build_constraint_data(solution, coeffs, model, terminal, cost);
  switch (rule) {
    case UpdateRule::frozen: {
      CoefficientUpdate out;
      out.coefficients = coeffs;
      out.slack = w_membership(coeffs, d);
      out.flags.outside_w = out.slack > kMembershipTolerance;
      return out;
    }
    case UpdateRule::allocation: return allocation_update(coeffs, d);
    case UpdateRule::td_constrained:
      return critic_update(coeffs, solution.states, solution.controls, d, model, cost, lower_bound);
  }
  throw InvalidArgument("update_coefficients: unknown rule");
}

struct CalibrationSample {
  Vec x;
  Vec u;
};

struct CalibrationResult {
  double weight = 0.0;
  int sweeps = 0;
  double mean_ratio = 0.0;  // sum l*l' / sum l^2 over the samples
  std::vector<double> trace;
};

/// Offline TD iteration of the single stage-cost weight over a fixed sample set.
inline CalibrationResult offline_td_calibrate(const SystemModel& model, const StageCost& cost,
                                              const std::vector<CalibrationSample>& samples,
                                              double tolerance = 1e-10, int max_sweeps = 10000,
                                              double initial_weight = 1.0) {
  if (!(tolerance > 0.0)) throw InvalidArgument("offline_td_calibrate: tolerance must be positive");
  if (max_sweeps < 1) throw InvalidArgument("offline_td_calibrate: max_sweeps must be positive");
  std::vector<double> l, l_next;
  for (const CalibrationSample& s : samples) {
    const double v = cost.evaluate(s.x, s.u);
    if (!(v > kDegenerateCost)) continue;
    const Vec next = model.step(s.x, s.u);
    l.push_back(v);
    l_next.push_back(cost.evaluate(next, cost.control_minimizer_at(next)));
  }
  if (l.empty()) throw InvalidArgument("offline_td_calibrate: all samples are degenerate");

  CalibrationResult r;
  double w = initial_weight;
  r.trace.push_back(w);
  double sum_ll = 0.0, sum_lln = 0.0;
  for (std::size_t s = 0; s < l.size(); ++s) {
    sum_ll += l[s] * l[s];
    sum_lln += l[s] * l_next[s];
  }
  r.mean_ratio = sum_lln / sum_ll;
  for (int j = 1; j <= max_sweeps; ++j) {
    // argmin_C sum_s (l_s - C l_s + w l'_s)^2
    double num = 0.0;
    for (std::size_t s = 0; s < l.size(); ++s) num += l[s] * (l[s] + w * l_next[s]);
    const double next = num / sum_ll;
    r.trace.push_back(next);
    r.sweeps = j;
    if (!std::isfinite(next) || std::abs(next) > kCoefficientCap) {
      std::string msg = "offline_td_calibrate: iteration diverged (|w| > 1e6) after " +
                        std::to_string(j) + " sweeps; trace tail:";
      for (std::size_t k = r.trace.size() > 5 ? r.trace.size() - 5 : 0; k < r.trace.size(); ++k) {
        msg += " " + std::to_string(r.trace[k]);
      }
      throw NumericalError(msg);
    }
    const double change = std::abs(next - w);
    w = next;
    if (change <= tolerance) {
      r.weight = w;
      return r;
    }
  }
  r.weight = w;
  throw NumericalError("offline_td_calibrate: no convergence within " + std::to_string(max_sweeps) +
                       " sweeps (last change above tolerance, w = " + std::to_string(w) + ")");
}

}  // namespace qsmpc
