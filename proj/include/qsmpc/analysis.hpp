#pragma once

#include <qsmpc/closed_loop.hpp>

#include <cmath>
#include <cstdio>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

namespace qsmpc {

struct VInfOptions {
  int horizon = 60;
  int max_horizon = 240;
  double relative_gap = 0.01;
  int max_steps = 400;
  double stop_norm = 1e-6;
  double tail_tol = 1e-10;
  // Warm start only, prestabilized when the terminal ingredients carry a gain.
  OcpOptions ocp = [] {
    OcpOptions o;
    o.multistart = 1;
    o.prestabilize = true;
    return o;
  }();
};

struct VInfEstimate {
  double value = 0.0;
  int horizon = 0;      // horizon of the returned value
  double gap = 0.0;     // |V(H/2) - V(H)| from the last doubling
  bool converged = false;  // gap within the relative threshold
  bool truncated = false;  // some probe hit max_steps; its unfinished plan was added
  std::vector<std::pair<int, double>> probes;
};

/// Long-horizon baseline closed-loop cost as a stand-in for the infinite
/// horizon value, doubling the horizon until two successive values agree.
inline VInfEstimate estimate_v_infinity(const SystemModel& model, const StageCost& cost,
                                        const TerminalIngredients& terminal, const Vec& x0,
                                        const VInfOptions& opts = {}) {
  if (opts.horizon < 1 || opts.max_horizon < opts.horizon) {
    throw InvalidArgument("estimate_v_infinity: bad horizon range");
  }
  if (!(opts.relative_gap > 0.0)) throw InvalidArgument("estimate_v_infinity: gap must be positive");
  // Each doubled probe starts from the previous plan, extended by the local
  // control law; the extension stays in the terminal set.
  VInfEstimate est;
  std::optional<std::vector<Vec>> seed;
  auto extend = [&](const std::vector<Vec>& plan, int H) {
    std::vector<Vec> out = plan;
    Vec x = x0;
    for (const Vec& u : plan) x = model.step(x, u);
    while (static_cast<int>(out.size()) < H) {
      out.push_back(terminal.local_control(x));
      x = model.step(x, out.back());
    }
    return out;
  };
  auto value_at = [&](int H) {
    LoopConfig cfg;
    if (seed) cfg.initial_warm_start = extend(*seed, H);
    cfg.controller = ControllerKind::baseline;
    cfg.horizon = H;
    cfg.max_steps = opts.max_steps;
    cfg.stop_norm = opts.stop_norm;
    cfg.tail_tol = opts.tail_tol;
    cfg.ocp = opts.ocp;
    cfg.ocp.prestabilize = opts.ocp.prestabilize && terminal.lq_gain().has_value();
    const ClosedLoopTrace tr = run_closed_loop(model, cost, terminal, cfg, x0);
    if (tr.infeasible_at_start || tr.infeasible_mid_run) {
      throw NumericalError("estimate_v_infinity: baseline infeasible at horizon " +
                           std::to_string(H) + " from " + to_string(x0));
    }
    if (!tr.first_plan.empty()) seed = tr.first_plan;
    if (!tr.converged && !tr.steps.empty()) {
      est.truncated = true;
      return tr.accumulated_cost + tr.steps.back().value - tr.steps.back().stage_cost;
    }
    return tr.accumulated_cost;
  };

  int H = opts.horizon;
  double previous = value_at(H);
  est.probes.emplace_back(H, previous);
  while (true) {
    const int next = 2 * H;
    if (next > opts.max_horizon) {
      est.value = previous;
      est.horizon = H;
      break;
    }
    const double v = value_at(next);
    est.probes.emplace_back(next, v);
    est.gap = std::abs(previous - v);
    est.value = v;
    est.horizon = next;
    if (est.gap <= opts.relative_gap * std::abs(v)) {
      est.converged = true;
      break;
    }
    H = next;
    previous = v;
  }
  if (est.probes.size() == 1) est.converged = false;
  return est;
}

inline VInfEstimate estimate_v_infinity(const SystemModel& model, const StageCost& cost,
                                        const TerminalIngredients& terminal, const Vec& x0,
                                        int surrogate_horizon) {
  VInfOptions o;
  o.horizon = surrogate_horizon;
  o.max_horizon = std::max(o.max_horizon, surrogate_horizon);
  return estimate_v_infinity(model, cost, terminal, x0, o);
}

struct SuboptimalityReport {
  Vec x0;
  double v_inf_surrogate = 0.0;
  double delta0 = 0.0;
  double gamma0 = 0.0;
  double delta_l_sum = 0.0;
  double shaped_cost = 0.0;
  double baseline_cost = 0.0;
  double bound5_slack = 0.0;
  double bound6_slack = 0.0;
  double bound19_delta_VN = 0.0;
  double bound20_slack = 0.0;
  int surrogate_horizon = 0;
  double surrogate_gap = 0.0;
  std::string flags;

  // Slack allowed on the bound checks: surrogate error plus solver noise.
  double tolerance() const { return surrogate_gap + 1e-8; }
  bool bounds_hold() const {
    const double t = tolerance();
    return bound5_slack >= -t && bound6_slack >= -t && bound20_slack >= -t;
  }
};

/// Sum of (c_k(0) - 1) l(x_k, u_k) over the solved steps.
inline double delta_l_sum(const ClosedLoopTrace& trace) {
  double s = 0.0;
  for (const StepRecord& r : trace.steps) {
    if (r.feasible) s += (r.coefficients[0] - 1.0) * r.stage_cost;
  }
  return s;
}

inline SuboptimalityReport build_report(const ClosedLoopTrace& shaped,
                                        const ClosedLoopTrace& baseline, double v_inf) {
  if (shaped.initial_state.size() != baseline.initial_state.size() ||
      shaped.initial_state != baseline.initial_state) {
    throw InvalidArgument("build_report: traces start from different states " +
                          to_string(shaped.initial_state) + " and " +
                          to_string(baseline.initial_state));
  }
  if (!shaped.converged || !baseline.converged) {
    throw InvalidArgument("build_report: both traces must have converged");
  }
  if (!std::isfinite(v_inf)) throw InvalidArgument("build_report: surrogate value not finite");
  SuboptimalityReport r;
  r.x0 = shaped.initial_state;
  r.v_inf_surrogate = v_inf;
  r.delta0 = shaped.initial_value() - v_inf;
  r.gamma0 = baseline.initial_value() - v_inf;
  r.delta_l_sum = delta_l_sum(shaped);
  r.shaped_cost = shaped.accumulated_cost;
  r.baseline_cost = baseline.accumulated_cost;
  r.bound5_slack = v_inf + r.delta0 - r.delta_l_sum - r.shaped_cost;
  r.bound6_slack = r.delta0 - r.delta_l_sum;
  r.bound19_delta_VN = -r.gamma0 + r.delta0 - r.delta_l_sum;
  r.bound20_slack = r.baseline_cost + r.delta0 - r.delta_l_sum - r.shaped_cost;
  if (r.delta0 < 0.0) r.flags = "negative_delta0";
  return r;
}

inline SuboptimalityReport build_report(const ClosedLoopTrace& shaped,
                                        const ClosedLoopTrace& baseline, const VInfEstimate& v) {
  SuboptimalityReport r = build_report(shaped, baseline, v.value);
  r.surrogate_horizon = v.horizon;
  r.surrogate_gap = v.gap;
  auto flag = [&](const char* f) { r.flags += r.flags.empty() ? f : std::string("|") + f; };
  if (!v.converged) flag("surrogate_unconverged");
  if (v.truncated) flag("surrogate_truncated");
  if (!r.bounds_hold()) flag("bound_violated");
  return r;
}

inline void write_report_csv_header(std::ostream& os, Eigen::Index state_dim) {
  for (Eigen::Index j = 0; j < state_dim; ++j) os << "x0_" << j << ',';
  os << "v_inf,delta0,gamma0,delta_l_sum,shaped_cost,baseline_cost,bound5_slack,bound6_slack,"
        "delta_VN,bound20_slack,flags\n";
}

inline void write_report_csv_row(std::ostream& os, const SuboptimalityReport& r) {
  char buf[64];
  auto put = [&](double v) {
    std::snprintf(buf, sizeof buf, "%.17g", v);
    os << buf << ',';
  };
  for (Eigen::Index j = 0; j < r.x0.size(); ++j) put(r.x0[j]);
  for (double v : {r.v_inf_surrogate, r.delta0, r.gamma0, r.delta_l_sum, r.shaped_cost,
                   r.baseline_cost, r.bound5_slack, r.bound6_slack, r.bound19_delta_VN,
                   r.bound20_slack}) {
    put(v);
  }
  os << r.flags << '\n';
}

}  // namespace qsmpc
