#pragma once

#include <qsmpc/analysis.hpp>
#include <qsmpc/benchmarks.hpp>
#include <qsmpc/closed_loop.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

namespace qsmpc {

struct SweepSpec {
  std::vector<double> grid_min, grid_max;
  std::vector<int> grid_points;
  LoopConfig shaped;
  LoopConfig baseline;
  int workers = 1;
  bool with_report = false;  // V_inf surrogate per cell; expensive
  VInfOptions vinf;

  int cell_count() const {
    int n = 1;
    for (int p : grid_points) n *= p;
    return n;
  }

  // Cells are ordered with the last dimension varying fastest.
  Vec cell_state(int index) const {
    const std::size_t d = grid_points.size();
    Vec x(static_cast<Eigen::Index>(d));
    for (std::size_t j = d; j-- > 0;) {
      const int i = index % grid_points[j];
      index /= grid_points[j];
      x[static_cast<Eigen::Index>(j)] =
          grid_min[j] + (grid_max[j] - grid_min[j]) * i / (grid_points[j] - 1);
    }
    return x;
  }

  void validate(const SystemModel& model) const {
    const std::size_t d = static_cast<std::size_t>(model.state_dim());
    if (grid_min.size() != d || grid_max.size() != d || grid_points.size() != d) {
      throw InvalidArgument("SweepSpec: grid dimension differs from the state dimension");
    }
    for (std::size_t j = 0; j < d; ++j) {
      if (grid_points[j] < 2) throw InvalidArgument("SweepSpec: at least 2 grid points per dimension");
      if (!(grid_min[j] < grid_max[j])) throw InvalidArgument("SweepSpec: grid_min must be below grid_max");
      const Eigen::Index k = static_cast<Eigen::Index>(j);
      if (grid_min[j] < model.state_box().lower[k] || grid_max[j] > model.state_box().upper[k]) {
        throw InvalidArgument("SweepSpec: grid leaves the state box");
      }
    }
    if (workers < 1) throw InvalidArgument("SweepSpec: workers must be at least 1");
    if (shaped.controller != ControllerKind::shaped || baseline.controller != ControllerKind::baseline) {
      throw InvalidArgument("SweepSpec: controller kinds swapped");
    }
    shaped.validate();
    baseline.validate();
  }
};

struct CellResult {
  Vec x0;
  double shaped_cost = std::numeric_limits<double>::quiet_NaN();
  double baseline_cost = std::numeric_limits<double>::quiet_NaN();
  double cost_diff = std::numeric_limits<double>::quiet_NaN();  // baseline - shaped
  bool shaped_converged = false;
  bool baseline_converged = false;
  double delta0 = std::numeric_limits<double>::quiet_NaN();
  double gamma0 = std::numeric_limits<double>::quiet_NaN();
  double delta_l_sum = std::numeric_limits<double>::quiet_NaN();
  double bound6_slack = std::numeric_limits<double>::quiet_NaN();
  std::string flags;

  bool failed() const { return !shaped_converged || !baseline_converged || !std::isfinite(cost_diff); }
};

struct SweepSummary {
  int cells = 0;
  int shaped_better = 0;
  int baseline_better = 0;
  int ties = 0;
  int failed = 0;
  double fraction_shaped_better() const { return cells ? double(shaped_better) / cells : 0.0; }
  double fraction_baseline_better() const { return cells ? double(baseline_better) / cells : 0.0; }
  double fraction_failed() const { return cells ? double(failed) / cells : 0.0; }
};

struct SweepResult {
  std::vector<double> grid_min, grid_max;
  std::vector<int> grid_points;
  std::vector<CellResult> cells;

  SweepSummary summary() const {
    SweepSummary s;
    s.cells = static_cast<int>(cells.size());
    for (const CellResult& c : cells) {
      if (c.failed()) ++s.failed;
      else if (c.cost_diff > 0.0) ++s.shaped_better;
      else if (c.cost_diff < 0.0) ++s.baseline_better;
      else ++s.ties;
    }
    return s;
  }
};

namespace detail {

inline void add_flag(std::string& flags, const std::string& f) {
  flags += flags.empty() ? f : "|" + f;
}

// Flags go into a CSV field: keep them free of separators and quotes.
inline std::string sanitize_flag(std::string s) {
  for (char& ch : s) {
    if (ch == ',' || ch == '\n' || ch == '\r' || ch == '"' || ch == '|') ch = ';';
  }
  return s;
}

}  // namespace detail

/// Baseline and shaped closed loops from one initial state.
inline CellResult run_cell(const SystemModel& model, const StageCost& cost,
                           const TerminalIngredients& terminal, const SweepSpec& spec, const Vec& x0) {
  CellResult c;
  c.x0 = x0;
  std::optional<ClosedLoopTrace> shaped, baseline;
  auto attempt = [&](const LoopConfig& cfg, const char* name, std::optional<ClosedLoopTrace>& out) {
    try {
      out = run_closed_loop(model, cost, terminal, cfg, x0);
      if (out->infeasible_at_start) detail::add_flag(c.flags, std::string(name) + "_infeasible_start");
      else if (out->infeasible_mid_run) detail::add_flag(c.flags, std::string(name) + "_infeasible_mid_run");
      else if (!out->converged) detail::add_flag(c.flags, std::string(name) + "_max_steps");
    } catch (const std::exception& e) {
      detail::add_flag(c.flags, std::string(name) + "_error:" + detail::sanitize_flag(e.what()));
      out.reset();
    }
  };
  attempt(spec.baseline, "baseline", baseline);
  attempt(spec.shaped, "shaped", shaped);
  if (baseline && !baseline->infeasible_at_start) {
    c.baseline_cost = baseline->accumulated_cost;
    c.baseline_converged = baseline->converged;
  }
  if (shaped && !shaped->infeasible_at_start) {
    c.shaped_cost = shaped->accumulated_cost;
    c.shaped_converged = shaped->converged;
    c.delta_l_sum = delta_l_sum(*shaped);
  }
  if (!c.shaped_converged || !c.baseline_converged) return c;
  c.cost_diff = c.baseline_cost - c.shaped_cost;

  if (!spec.with_report) {
    detail::add_flag(c.flags, "no_report");
    return c;
  }
  try {
    const VInfEstimate v = estimate_v_infinity(model, cost, terminal, x0, spec.vinf);
    const SuboptimalityReport r = build_report(*shaped, *baseline, v);
    c.delta0 = r.delta0;
    c.gamma0 = r.gamma0;
    c.bound6_slack = r.bound6_slack;
    if (!r.flags.empty()) detail::add_flag(c.flags, r.flags);
  } catch (const std::exception& e) {
    detail::add_flag(c.flags, "report_error:" + detail::sanitize_flag(e.what()));
  }
  return c;
}

/// Every grid cell, statically partitioned over the workers. Results are
/// stored by cell index, so the worker count cannot change them.
inline SweepResult run_sweep(const SystemModel& model, const StageCost& cost,
                             const TerminalIngredients& terminal, const SweepSpec& spec) {
  spec.validate(model);
  SweepResult result;
  result.grid_min = spec.grid_min;
  result.grid_max = spec.grid_max;
  result.grid_points = spec.grid_points;
  const int n = spec.cell_count();
  result.cells.resize(n);
  const int workers = std::min(spec.workers, n);
  auto work = [&](int w) {
    for (int i = w; i < n; i += workers) {
      result.cells[i] = run_cell(model, cost, terminal, spec, spec.cell_state(i));
    }
  };
  if (workers == 1) {
    work(0);
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) pool.emplace_back(work, w);
    for (std::thread& t : pool) t.join();
  }
  return result;
}

inline SweepResult run_sweep(const Plant& plant, const SweepSpec& spec) {
  return run_sweep(plant.model, plant.cost, plant.terminal, spec);
}

// ---- emission -------------------------------------------------------------

namespace detail {

inline std::string fmt17(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::ofstream open_out(const std::filesystem::path& p) {
  std::ofstream os(p);
  if (!os) throw std::runtime_error("cannot open " + p.string() + " for writing");
  return os;
}

// Diverging map: blue for t > 0, yellow-orange for t < 0, white at 0.
inline std::string diverging_colour(double t) {
  t = std::clamp(t, -1.0, 1.0);
  const double pos[3] = {33, 102, 172};
  const double neg[3] = {230, 171, 2};
  const double* end = t >= 0.0 ? pos : neg;
  const double a = std::abs(t);
  char buf[16];
  std::snprintf(buf, sizeof buf, "#%02x%02x%02x", int(std::lround(255 + a * (end[0] - 255))),
                int(std::lround(255 + a * (end[1] - 255))), int(std::lround(255 + a * (end[2] - 255))));
  return buf;
}

}  // namespace detail

inline const char* cells_csv_header() {
  return "x0_0,x0_1,shaped_cost,baseline_cost,cost_diff,shaped_converged,baseline_converged,"
         "delta0,gamma0,delta_l_sum,bound6_slack,flags";
}

inline void write_cells_csv(std::ostream& os, const SweepResult& r) {
  os << cells_csv_header() << '\n';
  using detail::fmt17;
  for (const CellResult& c : r.cells) {
    os << fmt17(c.x0[0]) << ',' << fmt17(c.x0[1]) << ',' << fmt17(c.shaped_cost) << ','
       << fmt17(c.baseline_cost) << ',' << fmt17(c.cost_diff) << ',' << (c.shaped_converged ? 1 : 0)
       << ',' << (c.baseline_converged ? 1 : 0) << ',' << fmt17(c.delta0) << ',' << fmt17(c.gamma0)
       << ',' << fmt17(c.delta_l_sum) << ',' << fmt17(c.bound6_slack) << ',' << c.flags << '\n';
  }
}

inline std::vector<CellResult> read_cells_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line) || line != cells_csv_header()) {
    throw InvalidArgument("read_cells_csv: unexpected header");
  }
  auto num = [](const std::string& s) {
    if (s == "nan" || s == "-nan") return std::numeric_limits<double>::quiet_NaN();
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw InvalidArgument("read_cells_csv: bad number '" + s + "'");
    return v;
  };
  std::vector<CellResult> out;
  while (std::getline(is, line)) {
    std::vector<std::string> f;
    std::size_t start = 0;
    for (int k = 0; k < 11; ++k) {
      const std::size_t comma = line.find(',', start);
      if (comma == std::string::npos) throw InvalidArgument("read_cells_csv: short row");
      f.push_back(line.substr(start, comma - start));
      start = comma + 1;
    }
    f.push_back(line.substr(start));
    CellResult c;
    c.x0 = Vec(2);
    c.x0 << num(f[0]), num(f[1]);
    c.shaped_cost = num(f[2]);
    c.baseline_cost = num(f[3]);
    c.cost_diff = num(f[4]);
    c.shaped_converged = f[5] == "1";
    c.baseline_converged = f[6] == "1";
    c.delta0 = num(f[7]);
    c.gamma0 = num(f[8]);
    c.delta_l_sum = num(f[9]);
    c.bound6_slack = num(f[10]);
    c.flags = f[11];
    out.push_back(std::move(c));
  }
  return out;
}

inline void write_summary_csv(std::ostream& os, const SweepResult& r) {
  const SweepSummary s = r.summary();
  using detail::fmt17;
  os << "key,value\n";
  os << "cells," << s.cells << '\n';
  os << "shaped_better," << s.shaped_better << '\n';
  os << "baseline_better," << s.baseline_better << '\n';
  os << "ties," << s.ties << '\n';
  os << "failed," << s.failed << '\n';
  os << "fraction_shaped_better," << fmt17(s.fraction_shaped_better()) << '\n';
  os << "fraction_baseline_better," << fmt17(s.fraction_baseline_better()) << '\n';
  os << "fraction_failed," << fmt17(s.fraction_failed()) << '\n';
  for (std::size_t j = 0; j < r.grid_points.size(); ++j) {
    os << "grid_min_" << j << ',' << fmt17(r.grid_min[j]) << '\n';
    os << "grid_max_" << j << ',' << fmt17(r.grid_max[j]) << '\n';
    os << "grid_points_" << j << ',' << r.grid_points[j] << '\n';
  }
}

/// Filled grid of cost_diff, one rectangle per cell; x0_0 runs left to right
/// and x0_1 bottom to top. Failed cells are grey.
inline void write_contour_svg(std::ostream& os, const SweepResult& r) {
  if (r.grid_points.size() != 2) throw InvalidArgument("write_contour_svg: two-dimensional grids only");
  const int nx = r.grid_points[0], ny = r.grid_points[1];
  const double cell = std::max(4.0, 400.0 / std::max(nx, ny));
  const double margin = 50.0;
  const double w = nx * cell, h = ny * cell;
  double scale = 0.0;
  for (const CellResult& c : r.cells) {
    if (!c.failed()) scale = std::max(scale, std::abs(c.cost_diff));
  }
  using detail::fmt17;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w + 2 * margin + 120 << "\" height=\""
     << h + 2 * margin << "\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"#ffffff\"/>\n";
  for (int i = 0; i < nx; ++i) {
    for (int j = 0; j < ny; ++j) {
      const CellResult& c = r.cells[static_cast<std::size_t>(i) * ny + j];
      const std::string fill =
          c.failed() ? "#999999" : detail::diverging_colour(scale > 0.0 ? c.cost_diff / scale : 0.0);
      os << "<rect x=\"" << margin + i * cell << "\" y=\"" << margin + (ny - 1 - j) * cell
         << "\" width=\"" << cell << "\" height=\"" << cell << "\" fill=\"" << fill << "\"/>\n";
    }
  }
  os << "<rect x=\"" << margin << "\" y=\"" << margin << "\" width=\"" << w << "\" height=\"" << h
     << "\" fill=\"none\" stroke=\"#000000\"/>\n";
  os << "<text x=\"" << margin << "\" y=\"" << margin + h + 20 << "\" font-size=\"12\">x0_0 from "
     << fmt17(r.grid_min[0]) << " to " << fmt17(r.grid_max[0]) << "</text>\n";
  os << "<text x=\"10\" y=\"" << margin - 20 << "\" font-size=\"12\">x0_1 from "
     << fmt17(r.grid_min[1]) << " (bottom) to " << fmt17(r.grid_max[1]) << " (top)</text>\n";
  const double lx = margin + w + 30;
  const int steps = 20;
  for (int k = 0; k < steps; ++k) {
    const double t = 1.0 - 2.0 * (k + 0.5) / steps;
    os << "<rect x=\"" << lx << "\" y=\"" << margin + k * h / steps << "\" width=\"20\" height=\""
       << h / steps + 0.5 << "\" fill=\"" << detail::diverging_colour(t) << "\"/>\n";
  }
  os << "<text x=\"" << lx + 25 << "\" y=\"" << margin + 10 << "\" font-size=\"11\">+"
     << fmt17(scale) << "</text>\n";
  os << "<text x=\"" << lx + 25 << "\" y=\"" << margin + h / 2 << "\" font-size=\"11\">0</text>\n";
  os << "<text x=\"" << lx + 25 << "\" y=\"" << margin + h << "\" font-size=\"11\">-" << fmt17(scale)
     << "</text>\n";
  os << "<text x=\"" << lx << "\" y=\"" << margin + h + 20
     << "\" font-size=\"11\">baseline - shaped</text>\n";
  os << "</svg>\n";
}

/// cells.csv, summary.csv and contour.svg in `dir` (created if missing).
inline void emit_results(const SweepResult& r, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw std::runtime_error("cannot create " + dir.string() + ": " + ec.message());
  {
    std::ofstream os = detail::open_out(dir / "cells.csv");
    write_cells_csv(os, r);
    if (!os) throw std::runtime_error("write failed for " + (dir / "cells.csv").string());
  }
  {
    std::ofstream os = detail::open_out(dir / "summary.csv");
    write_summary_csv(os, r);
    if (!os) throw std::runtime_error("write failed for " + (dir / "summary.csv").string());
  }
  if (r.grid_points.size() == 2) {
    std::ofstream os = detail::open_out(dir / "contour.svg");
    write_contour_svg(os, r);
    if (!os) throw std::runtime_error("write failed for " + (dir / "contour.svg").string());
  }
}

/// Shaped and baseline loop configurations for a benchmark's defaults.
inline SweepSpec sweep_spec_for(const BenchmarkSettings& s) {
  SweepSpec spec;
  spec.grid_min = s.grid_min;
  spec.grid_max = s.grid_max;
  spec.grid_points = s.grid_points;
  spec.shaped.controller = ControllerKind::shaped;
  spec.shaped.horizon = s.horizon;
  spec.shaped.initial_coefficients = CoefficientVector::constant(s.horizon, s.initial_coefficient);
  spec.shaped.lower_bound = s.lower_bound;
  spec.baseline.controller = ControllerKind::baseline;
  spec.baseline.horizon = s.horizon;
  return spec;
}

}  // namespace qsmpc
