#pragma once

#include <qsmpc/config.hpp>
#include <qsmpc/invariants.hpp>
#include <qsmpc/sweep.hpp>

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

namespace qsmpc::cli {

enum ExitCode { ok = 0, io_failure = 1, config_failure = 2, numerical_failure = 3, check_failure = 4 };

struct Streams {
  std::ostream& out;
  std::ostream& err;
};

namespace detail {

inline std::string num(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline Settings settings_from(const std::string& config_path, const ConfigMap& overrides) {
  ConfigMap m = config_path.empty() ? ConfigMap{} : load_config_file(config_path);
  for (const auto& [k, v] : overrides) set_config_value(m, k, v);
  return resolve_settings(m);
}

inline void print_report(std::ostream& os, const SuboptimalityReport& r, const VInfEstimate& v) {
  os << "x0: " << to_string(r.x0) << '\n'
     << "v_inf_surrogate: " << num(r.v_inf_surrogate) << " (horizon " << v.horizon << ", gap "
     << num(v.gap) << ")\n"
     << "delta0: " << num(r.delta0) << '\n'
     << "gamma0: " << num(r.gamma0) << '\n'
     << "delta_l_sum: " << num(r.delta_l_sum) << '\n'
     << "shaped_cost: " << num(r.shaped_cost) << '\n'
     << "baseline_cost: " << num(r.baseline_cost) << '\n'
     << "bound5_slack: " << num(r.bound5_slack) << '\n'
     << "bound6_slack: " << num(r.bound6_slack) << '\n'
     << "delta_VN: " << num(r.bound19_delta_VN) << '\n'
     << "bound20_slack: " << num(r.bound20_slack) << '\n'
     << "bounds_hold: " << (r.bounds_hold() ? "yes" : "no") << '\n'
     << "flags: " << (r.flags.empty() ? "none" : r.flags) << '\n';
}

inline const char* loop_problem(const ClosedLoopTrace& t) {
  if (t.infeasible_at_start) return "infeasible at the initial state";
  if (t.infeasible_mid_run) return "lost feasibility during the run";
  if (!t.converged) return "did not reach the equilibrium within max_steps";
  return nullptr;
}

inline int cmd_run(const Settings& s, Streams io) {
  if (!s.x0) throw ConfigError("run: config key 'x0' is required");
  const Plant p = build_plant(s.bench);
  const ClosedLoopTrace tr = run_closed_loop(p.model, p.cost, p.terminal, s.loop(s.controller), *s.x0);
  const bool to_stdout = s.trace == "-";
  if (to_stdout) {
    write_trace_csv(io.out, tr);
  } else {
    std::ofstream f(s.trace);
    if (!f) throw std::runtime_error("cannot open " + s.trace + " for writing");
    write_trace_csv(f, tr);
    if (!f) throw std::runtime_error("write failed for " + s.trace);
  }
  std::ostream& rep = to_stdout ? io.err : io.out;
  rep << "controller: " << to_string(s.controller) << '\n'
      << "steps: " << tr.steps_taken() << '\n'
      << "accumulated_cost: " << num(tr.accumulated_cost) << '\n'
      << "converged: " << (tr.converged ? "yes" : "no") << '\n';
  if (const char* why = loop_problem(tr)) {
    io.err << "error: " << to_string(s.controller) << " closed loop from " << to_string(*s.x0) << ' '
           << why << '\n';
    return numerical_failure;
  }
  if (s.controller == ControllerKind::baseline) return ok;
  const ClosedLoopTrace base =
      run_closed_loop(p.model, p.cost, p.terminal, s.loop(ControllerKind::baseline), *s.x0);
  if (const char* why = loop_problem(base)) {
    io.err << "error: paired baseline closed loop " << why << '\n';
    return numerical_failure;
  }
  const VInfEstimate v = estimate_v_infinity(p.model, p.cost, p.terminal, *s.x0, s.vinf());
  print_report(rep, build_report(tr, base, v), v);
  return ok;
}

inline int cmd_sweep(const Settings& s, Streams io) {
  const Plant p = build_plant(s.bench);
  const auto t0 = std::chrono::steady_clock::now();
  const SweepResult r = run_sweep(p, s.sweep());
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  emit_results(r, s.out);
  const SweepSummary sum = r.summary();
  io.out << "benchmark: " << to_string(s.bench.benchmark) << '\n'
         << "cells: " << sum.cells << '\n'
         << "shaped_better: " << sum.shaped_better << " (" << num(sum.fraction_shaped_better()) << ")\n"
         << "baseline_better: " << sum.baseline_better << " (" << num(sum.fraction_baseline_better())
         << ")\n"
         << "ties: " << sum.ties << '\n'
         << "failed: " << sum.failed << " (" << num(sum.fraction_failed()) << ")\n"
         << "seconds: " << num(secs) << '\n'
         << "output: " << s.out << '\n';
  return ok;
}

/// Samples uniform over the sweep region, controls from the clipped local law.
inline std::vector<CalibrationSample> calibration_samples(const Settings& s, const Plant& p) {
  std::vector<CalibrationSample> out;
  for (const Vec& x : sample_states(s.bench.grid_min, s.bench.grid_max, s.samples.value_or(500), s.seed)) {
    out.push_back({x, p.terminal.local_control(x)});
  }
  return out;
}

inline int cmd_calibrate(const Settings& s, Streams io) {
  const Plant p = build_plant(s.bench);
  const CalibrationResult r = offline_td_calibrate(p.model, p.cost, calibration_samples(s, p));
  io.out << "w*: " << num(r.weight) << '\n'
         << "sweeps: " << r.sweeps << '\n'
         << "mean_ratio: " << num(r.mean_ratio) << '\n';
  return ok;
}

struct CheckLine {
  bool passed;
  std::string text;
};

inline std::vector<CheckLine> check_benchmark(const Settings& s, int states, Streams io) {
  std::vector<CheckLine> lines;
  const std::string tag = std::string(to_string(s.bench.benchmark)) + ": ";
  auto add = [&](bool passed, const std::string& text) {
    lines.push_back({passed, tag + text});
    io.out << (passed ? "PASS " : "FAIL ") << tag << text << std::endl;
  };
  const Plant p = build_plant(s.bench);
  const std::vector<Vec> xs = sample_states(s.bench.grid_min, s.bench.grid_max, states, s.seed);

  int mid_run = 0, runs = 0, identical = 0, bounds_checked = 0, bounds_ok = 0;
  std::string errors;
  double worst_decay[2] = {0.0, 0.0};
  const UpdateRule rules[2] = {UpdateRule::allocation, UpdateRule::td_constrained};
  for (const Vec& x : xs) {
    try {
      const ClosedLoopTrace base =
          run_closed_loop(p.model, p.cost, p.terminal, s.loop(ControllerKind::baseline), x);
      LoopConfig frozen = s.loop(ControllerKind::shaped);
      frozen.initial_coefficients = CoefficientVector::constant(frozen.horizon, 1.0);
      frozen.update_rule = UpdateRule::frozen;
      if (identical_traces(base, run_closed_loop(p.model, p.cost, p.terminal, frozen, x))) ++identical;
      std::vector<ClosedLoopTrace> shaped;
      for (int r = 0; r < 2; ++r) {
        LoopConfig c = s.loop(ControllerKind::shaped);
        c.update_rule = rules[r];
        shaped.push_back(run_closed_loop(p.model, p.cost, p.terminal, c, x));
        worst_decay[r] = std::max(worst_decay[r], max_decay_residual(shaped.back()));
        if (shaped.back().infeasible_mid_run) ++mid_run;
        ++runs;
      }
      if (!base.converged) continue;
      const VInfEstimate v = estimate_v_infinity(p.model, p.cost, p.terminal, x, s.vinf());
      for (const ClosedLoopTrace& t : shaped) {
        if (!t.converged) continue;
        ++bounds_checked;
        if (build_report(t, base, v).bounds_hold()) ++bounds_ok;
      }
    } catch (const std::exception& e) {
      errors += " [" + to_string(x) + ": " + e.what() + "]";
    }
  }
  for (int r = 0; r < 2; ++r) {
    add(worst_decay[r] <= 1e-6, std::string("decay residual with ") + std::string(to_string(rules[r])) +
                                    " updates, max " + num(worst_decay[r]));
  }
  add(mid_run == 0, "no mid-run infeasibility in " + std::to_string(runs) + " shaped runs");
  add(identical == states, "frozen unit coefficients reproduce the baseline in " +
                               std::to_string(identical) + " of " + std::to_string(states) + " states");
  add(bounds_ok == bounds_checked, "suboptimality bounds hold in " + std::to_string(bounds_ok) + " of " +
                                       std::to_string(bounds_checked) + " runs");
  if (!errors.empty()) add(false, "errors:" + errors);

  if (s.bench.benchmark == Benchmark::msd) {
    int held = 0;
    for (const Vec& x : xs) {
      LoopConfig c = s.loop(ControllerKind::shaped);
      c.initial_coefficients = CoefficientVector::constant(c.horizon, 1.0);
      c.update_rule = UpdateRule::allocation;
      if (allocation_range(run_closed_loop(p.model, p.cost, p.terminal, c, x), 1e-9).holds) ++held;
    }
    add(held == states, "allocation from unit coefficients keeps 1 <= c(0) <= max ratio in " +
                            std::to_string(held) + " of " + std::to_string(states) + " runs");
  }

  int increased = 0;
  const int tuples = 1000;
  for (const TdTuple& t :
       random_td_tuples(p.model, p.cost, s.bench.grid_min, s.bench.grid_max, tuples, s.seed + 1)) {
    const double c = td_update_closed_form(CoefficientVector::constant(1, t.c), {t.x}, {t.u}, p.model,
                                           p.cost)
                         .coefficients[0];
    if (c > 1.0 && c - t.c > 0.0) ++increased;
  }
  add(increased == tuples, "TD update exceeds 1 and increases c in " + std::to_string(increased) +
                               " of " + std::to_string(tuples) + " random tuples");
  return lines;
}

inline int cmd_check(const ConfigMap& merged, Streams io) {
  std::vector<Benchmark> which = {Benchmark::msd, Benchmark::primbs};
  if (merged.count("benchmark")) which = {resolve_settings(merged).bench.benchmark};
  bool all = true;
  for (Benchmark b : which) {
    ConfigMap m = merged;
    m["benchmark"] = std::string(to_string(b));
    const Settings s = resolve_settings(m);
    for (const CheckLine& l : check_benchmark(s, s.samples.value_or(10), io)) all = all && l.passed;
  }
  io.out << (all ? "all checks passed" : "some checks failed") << '\n';
  return all ? ok : check_failure;
}

}  // namespace detail

/// Entry point of the command-line tool; returns the process exit code.
inline int cli_main(int argc, const char* const* argv, Streams io = {std::cout, std::cerr}) {
  CLI::App app{"Terminal-constrained MPC with stage-cost shaping: closed loops, sweeps, calibration"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Show help for every subcommand");

  struct Sub {
    CLI::App* app;
    std::string config;
    ConfigMap overrides;
  };
  std::map<std::string, Sub> subs;
  const std::vector<std::pair<std::string, std::string>> names = {
      {"run", "One closed loop from x0; trace CSV and suboptimality report"},
      {"sweep", "Grid of initial states; writes cells.csv, summary.csv, contour.svg"},
      {"calibrate", "Offline TD fixed point of the scalar weight from sampled transitions"},
      {"check", "Invariant suite on sampled states of the benchmarks"},
  };
  for (const auto& [name, help] : names) {
    Sub& sub = subs[name];
    sub.app = app.add_subcommand(name, help);
    sub.app->add_option("--config", sub.config, "flat key = value file; flags override its keys");
    for (const ConfigKey& k : config_keys()) {
      sub.app->add_option_function<std::string>(
          std::string("--") + k.name, [&sub, key = std::string(k.name)](const std::string& v) {
            sub.overrides[key] = v;
          },
          k.help);
    }
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    io.out << app.help();
    return ok;
  } catch (const CLI::CallForAllHelp& e) {
    io.out << app.help("", CLI::AppFormatMode::All);
    return ok;
  } catch (const CLI::ParseError& e) {
    io.err << "error: " << e.what() << '\n';
    return config_failure;
  }

  for (auto& [name, sub] : subs) {
    if (!sub.app->parsed()) continue;
    try {
      if (name == "check") {
        ConfigMap m = sub.config.empty() ? ConfigMap{} : load_config_file(sub.config);
        for (const auto& [k, v] : sub.overrides) set_config_value(m, k, v);
        return detail::cmd_check(m, io);
      }
      const Settings s = detail::settings_from(sub.config, sub.overrides);
      if (name == "run") return detail::cmd_run(s, io);
      if (name == "sweep") return detail::cmd_sweep(s, io);
      return detail::cmd_calibrate(s, io);
    } catch (const ConfigError& e) {
      io.err << "config error: " << e.what() << '\n';
      return config_failure;
    } catch (const InvalidArgument& e) {
      io.err << "config error: " << e.what() << '\n';
      return config_failure;
    } catch (const NumericalError& e) {
      io.err << "numerical failure: " << e.what() << '\n';
      return numerical_failure;
    } catch (const std::exception& e) {
      io.err << "error: " << e.what() << '\n';
      return io_failure;
    }
  }
  return config_failure;
}

}  // namespace qsmpc::cli
