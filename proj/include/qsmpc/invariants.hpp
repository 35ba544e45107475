#pragma once

#include <qsmpc/analysis.hpp>
#include <qsmpc/benchmarks.hpp>
#include <qsmpc/shaping.hpp>

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <random>
#include <string>
#include <vector>

namespace qsmpc {

/// Uniform samples of the box [lo, hi].
inline std::vector<Vec> sample_states(const std::vector<double>& lo, const std::vector<double>& hi,
                                      int count, std::uint64_t seed) {
  if (lo.size() != hi.size()) throw InvalidArgument("sample_states: bound sizes differ");
  std::mt19937_64 rng(seed);
  std::vector<Vec> out;
  out.reserve(static_cast<std::size_t>(std::max(count, 0)));
  for (int s = 0; s < count; ++s) {
    Vec x(static_cast<Eigen::Index>(lo.size()));
    for (std::size_t j = 0; j < lo.size(); ++j) {
      x[static_cast<Eigen::Index>(j)] = std::uniform_real_distribution<double>(lo[j], hi[j])(rng);
    }
    out.push_back(x);
  }
  return out;
}

/// Largest decay residual V(k+1) - V(k) + c_k(0) l_k of a trace; 0 when it has
/// fewer than two solved steps.
inline double max_decay_residual(const ClosedLoopTrace& trace) {
  double worst = 0.0;
  for (double r : decay_check(trace)) worst = std::max(worst, r);
  return worst;
}

namespace detail {

inline bool same_bits(double a, double b) { return std::memcmp(&a, &b, sizeof a) == 0; }

inline bool same_bits(const Vec& a, const Vec& b) {
  if (a.size() != b.size()) return false;
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    if (!same_bits(a[i], b[i])) return false;
  }
  return true;
}

}  // namespace detail

/// Bitwise equality of the simulated trajectories, values and costs.
inline bool identical_traces(const ClosedLoopTrace& a, const ClosedLoopTrace& b) {
  using detail::same_bits;
  if (a.steps.size() != b.steps.size() || a.converged != b.converged ||
      !same_bits(a.accumulated_cost, b.accumulated_cost) || !same_bits(a.final_state, b.final_state)) {
    return false;
  }
  for (std::size_t k = 0; k < a.steps.size(); ++k) {
    const StepRecord& p = a.steps[k];
    const StepRecord& q = b.steps[k];
    if (!same_bits(p.state, q.state) || !same_bits(p.control, q.control) ||
        !same_bits(p.coefficients.values, q.coefficients.values) || !same_bits(p.value, q.value) ||
        !same_bits(p.stage_cost, q.stage_cost) || p.feasible != q.feasible) {
      return false;
    }
  }
  return true;
}

struct AllocationRange {
  bool holds = true;
  double lowest_c0 = std::numeric_limits<double>::infinity();
  double highest_c0 = -std::numeric_limits<double>::infinity();
  double max_ratio = -std::numeric_limits<double>::infinity();  // largest observed alpha-bar
};

/// 1 <= c_k(0) <= max_k alpha-bar_k along a trace, up to `tol`.
inline AllocationRange allocation_range(const ClosedLoopTrace& trace, double tol) {
  AllocationRange r;
  r.max_ratio = trace.max_terminal_ratio;
  for (const StepRecord& s : trace.steps) {
    if (!s.feasible) continue;
    r.lowest_c0 = std::min(r.lowest_c0, s.coefficients[0]);
    r.highest_c0 = std::max(r.highest_c0, s.coefficients[0]);
  }
  if (r.lowest_c0 < 1.0 - tol || r.highest_c0 > r.max_ratio + tol) r.holds = false;
  return r;
}

struct TdTuple {
  double c = 1.0;
  Vec x;
  Vec u;
};

/// Random (c, x, u) with c in (0, 1], x in the box and u within the control
/// bounds; tuples with zero stage cost are redrawn.
inline std::vector<TdTuple> random_td_tuples(const SystemModel& model, const StageCost& cost,
                                             const std::vector<double>& lo,
                                             const std::vector<double>& hi, int count,
                                             std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const Box& U = model.control_box();
  std::vector<TdTuple> out;
  while (static_cast<int>(out.size()) < count) {
    TdTuple t;
    t.c = 1.0 - unit(rng);
    t.x = sample_states(lo, hi, 1, rng())[0];
    t.u.resize(U.lower.size());
    for (Eigen::Index i = 0; i < t.u.size(); ++i) {
      t.u[i] = U.lower[i] + (U.upper[i] - U.lower[i]) * unit(rng);
    }
    if (cost.evaluate(t.x, t.u) > kDegenerateCost) out.push_back(std::move(t));
  }
  return out;
}

}  // namespace qsmpc
