#pragma once

#include <qsmpc/coefficients.hpp>
#include <qsmpc/core.hpp>
#include <qsmpc/dynamics.hpp>
#include <qsmpc/ingredients.hpp>
#include <qsmpc/ocp.hpp>
#include <qsmpc/shaping.hpp>

#include <cstdio>
#include <limits>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

namespace qsmpc {

enum class ControllerKind { baseline, shaped };

inline std::string_view to_string(ControllerKind c) {
  return c == ControllerKind::baseline ? "baseline" : "shaped";
}

inline ControllerKind parse_controller(std::string_view s) {
  if (s == "baseline") return ControllerKind::baseline;
  if (s == "shaped") return ControllerKind::shaped;
  throw InvalidArgument("unknown controller '" + std::string(s) + "'");
}

struct LoopConfig {
  ControllerKind controller = ControllerKind::shaped;
  int horizon = 10;
  CoefficientVector initial_coefficients;  // empty means all ones
  UpdateRule update_rule = UpdateRule::td_constrained;
  std::optional<double> lower_bound;
  int max_steps = 400;
  double stop_norm = 1e-6;
  double tail_tol = 1e-10;
  OcpOptions ocp;
  std::optional<std::vector<Vec>> initial_warm_start;  // control plan tried at k = 0

  void validate() const {
    if (horizon < 1) throw InvalidArgument("LoopConfig: horizon must be positive");
    if (max_steps < 1) throw InvalidArgument("LoopConfig: max_steps must be at least 1");
    if (!(stop_norm >= 0.0) || !(tail_tol >= 0.0)) {
      throw InvalidArgument("LoopConfig: thresholds must be nonnegative");
    }
    if (initial_warm_start && static_cast<int>(initial_warm_start->size()) != horizon) {
      throw InvalidArgument("LoopConfig: initial warm start length differs from horizon");
    }
    if (initial_coefficients.size() != 0) {
      if (initial_coefficients.size() != horizon) {
        throw InvalidArgument("LoopConfig: initial coefficient count differs from horizon");
      }
      if (!initial_coefficients.valid()) {
        throw InvalidArgument("LoopConfig: initial coefficients must be positive and finite");
      }
    }
  }

  CoefficientVector start_coefficients() const {
    if (controller == ControllerKind::baseline || initial_coefficients.size() == 0) {
      return CoefficientVector::constant(horizon, 1.0);
    }
    return initial_coefficients;
  }
};

struct StepRecord {
  int k = 0;
  Vec state;
  Vec control;
  CoefficientVector coefficients;  // c_k used in the time-k problem
  double stage_cost = 0.0;
  double value = 0.0;
  double decay_residual = std::numeric_limits<double>::quiet_NaN();  // filled from step k+1
  double w_slack = std::numeric_limits<double>::quiet_NaN();         // of c_{k+1} against W_k
  bool feasible = false;
  bool candidate_feasible = true;  // shifted sequence feasible at this step (true at k = 0)
  OcpStatus status = OcpStatus::infeasible;
  double terminal_ratio = std::numeric_limits<double>::quiet_NaN();  // alpha-bar
  double td_ratio = std::numeric_limits<double>::quiet_NaN();        // l(f(x,u), a*) / l(x,u)
  std::string flags;
};

struct ClosedLoopTrace {
  std::vector<StepRecord> steps;
  Vec initial_state;
  Vec final_state;
  std::vector<Vec> first_plan;  // optimal controls of the k = 0 problem
  double accumulated_cost = 0.0;
  double tail_estimate = std::numeric_limits<double>::quiet_NaN();  // F(x_final), reported apart
  bool converged = false;
  bool infeasible_at_start = false;
  bool infeasible_mid_run = false;
  int infeasible_step = -1;
  double max_td_ratio = 0.0;
  double min_terminal_ratio = std::numeric_limits<double>::infinity();
  double max_terminal_ratio = 0.0;
  int horizon = 0;
  ControllerKind controller = ControllerKind::shaped;

  int steps_taken() const { return static_cast<int>(steps.size()); }
  double initial_value() const { return steps.empty() ? 0.0 : steps.front().value; }
};

namespace detail {

inline bool stop_reached(const Vec& x, const SystemModel& model, const StageCost& cost,
                         const TerminalIngredients& terminal, const LoopConfig& cfg) {
  const Vec dx = x - model.equilibrium_state();
  return terminal.contains(x) && dx.norm() < cfg.stop_norm &&
         cost.evaluate(x, cost.control_minimizer_at(x)) < cfg.tail_tol;
}

}  // namespace detail

/// Receding-horizon loop: solve, update the coefficients under W_k, apply the
/// first control, repeat. The baseline controller pins all coefficients at 1.
inline ClosedLoopTrace run_closed_loop(const SystemModel& model, const StageCost& cost,
                                       const TerminalIngredients& terminal, const LoopConfig& cfg,
                                       const Vec& x0) {
  cfg.validate();
  if (x0.size() != model.state_dim() || !model.state_box().contains(x0)) {
    throw InvalidArgument("run_closed_loop: initial state " + to_string(x0) +
                          " outside the state box");
  }
  ClosedLoopTrace trace;
  trace.initial_state = x0;
  trace.horizon = cfg.horizon;
  trace.controller = cfg.controller;
  const bool adapt = cfg.controller == ControllerKind::shaped && cfg.update_rule != UpdateRule::frozen;

  Vec x = x0;
  CoefficientVector c = cfg.start_coefficients();
  std::optional<std::vector<Vec>> warm = cfg.initial_warm_start;
  std::optional<DualHint> dual;
  for (int k = 0; k < cfg.max_steps; ++k) {
    if (detail::stop_reached(x, model, cost, terminal, cfg)) {
      trace.converged = true;
      break;
    }
    try {
      const OcpProblem problem{model, cost, terminal, cfg.horizon, c, x};
      StepRecord rec;
      rec.k = k;
      rec.state = x;
      rec.coefficients = c;
      if (warm) rec.candidate_feasible = evaluate_candidate(problem, *warm).feasible;
      const OcpSolution sol = solve(problem, warm, cfg.ocp, dual);
      rec.status = sol.status;
      rec.feasible = sol.converged;
      if (!sol.converged) {
        (k == 0 ? trace.infeasible_at_start : trace.infeasible_mid_run) = true;
        trace.infeasible_step = k;
        rec.value = sol.value;
        rec.flags = "infeasible";
        trace.steps.push_back(std::move(rec));
        break;
      }
      rec.value = sol.value;
      rec.control = sol.controls[0];
      if (k == 0) trace.first_plan = sol.controls;
      rec.stage_cost = cost.evaluate(x, rec.control);
      if (!trace.steps.empty()) {
        StepRecord& prev = trace.steps.back();
        prev.decay_residual = rec.value - prev.value + prev.coefficients[0] * prev.stage_cost;
      }

      const Vec next = model.step(x, rec.control);
      if (rec.stage_cost > kDegenerateCost) {
        rec.td_ratio = cost.evaluate(next, cost.control_minimizer_at(next)) / rec.stage_cost;
        trace.max_td_ratio = std::max(trace.max_td_ratio, rec.td_ratio);
      }

      CoefficientUpdate upd;
      if (adapt) {
        upd = update_coefficients(cfg.update_rule, c, sol, model, cost, terminal, cfg.lower_bound);
      } else {
        upd = update_coefficients(UpdateRule::frozen, c, sol, model, cost, terminal);
      }
      const StabilityConstraintData data = build_constraint_data(sol, c, model, terminal, cost);
      if (data.terminal_stage > kDegenerateCost) {
        rec.terminal_ratio = data.terminal_drop / data.terminal_stage;
        trace.min_terminal_ratio = std::min(trace.min_terminal_ratio, rec.terminal_ratio);
        trace.max_terminal_ratio = std::max(trace.max_terminal_ratio, rec.terminal_ratio);
      }
      rec.w_slack = upd.slack;
      rec.flags = upd.flags.describe();
      if (sol.status == OcpStatus::warm_candidate) {
        rec.flags += rec.flags.empty() ? "warm" : "|warm";
      }

      trace.accumulated_cost += rec.stage_cost;
      warm = warm_start_shift(sol, terminal);
      if (sol.status == OcpStatus::solved) {
        dual = DualHint{sol.penalty, sol.terminal_multiplier};
      }
      trace.steps.push_back(std::move(rec));
      x = next;
      c = upd.coefficients;
    } catch (const NumericalError& e) {
      throw NumericalError("closed loop step " + std::to_string(k) + ": " + e.what());
    }
  }
  if (!trace.converged && !trace.infeasible_at_start && !trace.infeasible_mid_run) {
    trace.converged = detail::stop_reached(x, model, cost, terminal, cfg);
  }
  trace.final_state = x;
  trace.tail_estimate = terminal.cost(x);
  return trace;
}

/// Decay residuals V(k+1) - V(k) + c_k(0) l(x_k, u_k) for consecutive solved steps.
inline std::vector<double> decay_check(const ClosedLoopTrace& trace) {
  std::vector<double> r;
  for (std::size_t k = 0; k + 1 < trace.steps.size(); ++k) {
    const StepRecord& a = trace.steps[k];
    const StepRecord& b = trace.steps[k + 1];
    if (!a.feasible || !b.feasible) break;
    r.push_back(b.value - a.value + a.coefficients[0] * a.stage_cost);
  }
  return r;
}

inline void write_trace_csv(std::ostream& os, const ClosedLoopTrace& trace) {
  const Eigen::Index n = trace.initial_state.size();
  const Eigen::Index m = trace.steps.empty() || trace.steps.front().control.size() == 0
                             ? 1
                             : trace.steps.front().control.size();
  os << "k";
  for (Eigen::Index j = 0; j < n; ++j) os << ",x" << j;
  for (Eigen::Index j = 0; j < m; ++j) os << ",u" << j;
  for (int i = 0; i < trace.horizon; ++i) os << ",c" << i;
  os << ",stage_cost,value,decay_residual,w_slack,feasible\n";
  char buf[64];
  auto num = [&](double v) {
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return std::string(buf);
  };
  for (const StepRecord& s : trace.steps) {
    os << s.k;
    for (Eigen::Index j = 0; j < n; ++j) os << ',' << num(s.state[j]);
    for (Eigen::Index j = 0; j < m; ++j) {
      os << ',' << (j < s.control.size() ? num(s.control[j]) : std::string("nan"));
    }
    for (int i = 0; i < trace.horizon; ++i) os << ',' << num(s.coefficients[i]);
    os << ',' << num(s.stage_cost) << ',' << num(s.value) << ',' << num(s.decay_residual) << ','
       << num(s.w_slack) << ',' << (s.feasible ? 1 : 0) << '\n';
  }
}

}  // namespace qsmpc
