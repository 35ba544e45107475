#pragma once

#include <qsmpc/coefficients.hpp>
#include <qsmpc/core.hpp>
#include <qsmpc/dynamics.hpp>
#include <qsmpc/ingredients.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

namespace qsmpc {

/// Finite-horizon weighted OCP: minimize sum_i c(i) l(x(i), u(i)) + F(x(N))
/// subject to the dynamics, the state and control boxes, and x(N) in X_f.
/// Holds references; the referenced model and ingredients must outlive it.
struct OcpProblem {
  const SystemModel& model;
  const StageCost& cost;
  const TerminalIngredients& terminal;
  int horizon;
  CoefficientVector coefficients;
  Vec initial_state;

  void validate() const {
    if (horizon < 1) throw InvalidArgument("OcpProblem: horizon must be positive");
    if (coefficients.size() != horizon) {
      throw InvalidArgument("OcpProblem: coefficient count differs from horizon");
    }
    if (!coefficients.valid()) {
      throw InvalidArgument("OcpProblem: coefficients must be positive and finite");
    }
    if (initial_state.size() != model.state_dim()) {
      throw InvalidArgument("OcpProblem: initial state dimension mismatch");
    }
    if (!model.state_box().contains(initial_state)) {
      throw InvalidArgument("OcpProblem: initial state " + to_string(initial_state) +
                            " outside the state box");
    }
  }
};

struct OcpOptions {
  double tolerance = 1e-8;            // projected-gradient stationarity
  int max_iterations = 5000;          // per penalty round
  int multistart = 3;
  double feasibility_tolerance = 1e-8;
  int penalty_rounds = 8;  // penalty levels: rho takes at most this many values
  int max_outer_rounds = 40;
  double penalty_initial = 10.0;
  double penalty_growth = 10.0;
  double armijo_c1 = 1e-4;
  double armijo_shrink = 0.5;
  int max_backtracks = 60;
  // Optimize v with u = v - K (x - xbar) using the terminal LQ gain. Keeps
  // long-horizon rollouts of unstable plants well conditioned; the control box
  // then enters through the penalty instead of the projection.
  bool prestabilize = false;
};

enum class OcpStatus { solved, warm_candidate, infeasible };

inline std::string_view to_string(OcpStatus s) {
  switch (s) {
    case OcpStatus::solved: return "solved";
    case OcpStatus::warm_candidate: return "warm_candidate";
    case OcpStatus::infeasible: return "infeasible";
  }
  return "unknown";
}

struct OcpSolution {
  std::vector<Vec> controls;  // u*(0..N-1)
  std::vector<Vec> states;    // x*(0..N)
  double value = std::numeric_limits<double>::quiet_NaN();
  double terminal_margin = std::numeric_limits<double>::quiet_NaN();  // level - F(x(N))
  double state_box_margin = std::numeric_limits<double>::quiet_NaN();  // over x(1..N)
  double control_box_margin = std::numeric_limits<double>::quiet_NaN();
  bool feasible = false;
  bool converged = false;
  int iterations = 0;
  double kkt_residual = std::numeric_limits<double>::quiet_NaN();
  OcpStatus status = OcpStatus::infeasible;
  int start_index = -1;  // winning start; -1 for the warm candidate or a plain evaluation
  double penalty = std::numeric_limits<double>::quiet_NaN();  // final rho of the winning start
  double terminal_multiplier = 0.0;
};

// Penalty state carried over from a neighbouring problem, applied to the warm start.
struct DualHint {
  double penalty = 0.0;
  double terminal_multiplier = 0.0;
};

/// Roll out a control sequence and report value and constraint margins.
/// Makes no optimality claim: `converged` stays false.
inline OcpSolution evaluate_candidate(const OcpProblem& problem, const std::vector<Vec>& controls,
                                      double feasibility_tolerance = 1e-8) {
  problem.validate();
  const int N = problem.horizon;
  if (static_cast<int>(controls.size()) != N) {
    throw InvalidArgument("evaluate_candidate: control sequence length differs from horizon");
  }
  OcpSolution sol;
  sol.controls = controls;
  sol.states.reserve(N + 1);
  sol.states.push_back(problem.initial_state);
  double value = 0.0;
  double xmargin = std::numeric_limits<double>::infinity();
  double umargin = std::numeric_limits<double>::infinity();
  for (int i = 0; i < N; ++i) {
    if (controls[i].size() != problem.model.control_dim() || !controls[i].allFinite()) {
      throw NumericalError("evaluate_candidate: invalid control at index " + std::to_string(i));
    }
    value += problem.coefficients[i] * problem.cost.evaluate(sol.states[i], controls[i]);
    umargin = std::min(umargin, problem.model.control_box().margin(controls[i]));
    sol.states.push_back(problem.model.step(sol.states[i], controls[i]));
    xmargin = std::min(xmargin, problem.model.state_box().margin(sol.states.back()));
  }
  value += problem.terminal.cost(sol.states.back());
  if (!std::isfinite(value)) throw NumericalError("evaluate_candidate: non-finite objective");
  sol.value = value;
  sol.terminal_margin = problem.terminal.margin(sol.states.back());
  sol.state_box_margin = xmargin;
  sol.control_box_margin = umargin;
  sol.feasible = sol.terminal_margin >= -feasibility_tolerance &&
                 xmargin >= -feasibility_tolerance && umargin >= -feasibility_tolerance;
  sol.converged = false;
  sol.status = sol.feasible ? OcpStatus::warm_candidate : OcpStatus::infeasible;
  return sol;
}

/// Shifted feasible candidate {u*(1), ..., u*(N-1), mu_F(x*(N))}.
inline std::vector<Vec> warm_start_shift(const OcpSolution& previous,
                                         const TerminalIngredients& terminal) {
  if (!previous.converged) throw InvalidArgument("warm_start_shift: previous solution not converged");
  std::vector<Vec> shifted(previous.controls.begin() + 1, previous.controls.end());
  shifted.push_back(terminal.local_control(previous.states.back()));
  return shifted;
}

/// Augmented single-shooting objective over the flattened decision vector
/// z = (z_0, ..., z_{N-1}). Constraints (state box on x(1..N), terminal set,
/// and the control box when prestabilized) enter through the
/// Powell-Hestenes-Rockafellar term (max(0, lambda + 2 rho g)^2 - lambda^2) / (4 rho).
class ShootingObjective {
 public:
  struct Trajectory {
    std::vector<Vec> states;
    std::vector<Vec> controls;
  };

  ShootingObjective(const OcpProblem& problem, Mat prestab_gain = Mat())
      : p_(problem),
        N_(problem.horizon),
        n_(problem.model.state_dim()),
        m_(problem.model.control_dim()),
        K_(prestab_gain.size() ? std::move(prestab_gain)
                               : Mat::Zero(problem.model.control_dim(), problem.model.state_dim())),
        prestab_(!K_.isZero(0.0)),
        lam_x_(Vec::Zero(2 * N_ * n_)),
        lam_u_(Vec::Zero(2 * N_ * m_)) {
    problem.validate();
  }

  Eigen::Index size() const { return N_ * m_; }
  bool prestabilized() const { return prestab_; }

  double rho = 10.0;
  double lam_terminal = 0.0;
  // Penalized constraints are enforced as g + backoff <= 0.
  double backoff = 0.0;

  Vec encode(const std::vector<Vec>& controls) const {
    Vec z(size());
    Vec x = p_.initial_state;
    for (int i = 0; i < N_; ++i) {
      z.segment(i * m_, m_) = controls[i] + K_ * (x - p_.model.equilibrium_state());
      if (prestab_) x = p_.model.step(x, controls[i]);
    }
    return z;
  }

  Trajectory rollout(const Vec& z) const {
    Trajectory t;
    t.states.reserve(N_ + 1);
    t.controls.reserve(N_);
    t.states.push_back(p_.initial_state);
    for (int i = 0; i < N_; ++i) {
      Vec u = z.segment(i * m_, m_);
      if (prestab_) u -= K_ * (t.states[i] - p_.model.equilibrium_state());
      t.states.push_back(p_.model.step(t.states[i], u));
      t.controls.push_back(std::move(u));
    }
    return t;
  }

  // Objective without constraint terms.
  double plain_value(const Trajectory& t) const {
    double v = 0.0;
    for (int i = 0; i < N_; ++i) v += p_.coefficients[i] * p_.cost.evaluate(t.states[i], t.controls[i]);
    return v + p_.terminal.cost(t.states[N_]);
  }

  double value(const Trajectory& t) const {
    double v = plain_value(t);
    visit_constraints(*this, t, [&](double g, double lam) { v += phr(g, lam); });
    return v;
  }
  double value(const Vec& z) const { return value(rollout(z)); }

  // Largest violation of any constraint (0 when feasible).
  double violation(const Trajectory& t) const {
    double worst = 0.0;
    visit_constraints(*this, t, [&](double g, double) { worst = std::max(worst, g); });
    return worst;
  }

  // max_j |max(g_j, -lambda_j / (2 rho))|: zero at a KKT point of the penalty subproblem.
  double al_residual(const Trajectory& t) const {
    double r = 0.0;
    visit_constraints(*this, t, [&](double g, double lam) {
      r = std::max(r, std::abs(std::max(g, -lam / (2.0 * rho))));
    });
    return r;
  }

  void update_multipliers(const Trajectory& t) {
    visit_constraints(*this, t, [&](double g, double& lam) {
      lam = std::max(0.0, lam + 2.0 * rho * g);
    });
  }

  /// Stage data of the Gauss-Newton model in (x, u) coordinates.
  struct Stage {
    Mat A, B;
    Mat Wxx, Wuu, Wux;
    Vec qx, qu;
  };

  struct Linearization {
    Trajectory traj;
    double value = 0.0;
    Vec gradient;
    std::vector<Stage> stages;
    Mat WN;
    Vec qN;
  };

  Linearization linearize(const Vec& z) const {
    Linearization L;
    L.traj = rollout(z);
    L.value = value(L.traj);
    L.stages.resize(N_);
    for (int i = 0; i < N_; ++i) {
      const Vec& x = L.traj.states[i];
      const Vec& u = L.traj.controls[i];
      Stage& s = L.stages[i];
      const Jacobians J = p_.model.jacobian(x, u);
      s.A = J.A;
      s.B = J.B;
      const StageCostDerivatives d = p_.cost.derivatives(x, u);
      const double c = p_.coefficients[i];
      s.Wxx = c * d.lxx;
      s.Wuu = c * d.luu;
      s.Wux = c * d.lux;
      s.qx = c * d.lx;
      s.qu = c * d.lu;
      if (i > 0) add_box_terms(x, p_.model.state_box(), lam_x_, state_offset(i), s.Wxx, s.qx);
      if (prestab_) add_box_terms(u, p_.model.control_box(), lam_u_, control_offset(i), s.Wuu, s.qu);
    }
    const Vec& xN = L.traj.states[N_];
    const Vec gF = p_.terminal.gradient(xN);
    const Mat HF = p_.terminal.hessian(xN);
    const double gT = p_.terminal.cost(xN) - p_.terminal.level() + backoff;
    const double mu = std::max(0.0, lam_terminal + 2.0 * rho * gT);
    L.WN = (1.0 + mu) * HF;
    if (mu > 0.0) L.WN += 2.0 * rho * gF * gF.transpose();
    L.qN = (1.0 + mu) * gF;
    add_box_terms(xN, p_.model.state_box(), lam_x_, state_offset(N_), L.WN, L.qN);

    // Adjoint sweep.
    L.gradient.resize(size());
    Vec lam = L.qN;
    for (int i = N_ - 1; i >= 0; --i) {
      const Stage& s = L.stages[i];
      const Vec gz = s.qu + s.B.transpose() * lam;
      Vec next = s.qx + s.A.transpose() * lam;
      if (prestab_) next -= K_.transpose() * gz;
      L.gradient.segment(i * m_, m_) = gz;
      lam = std::move(next);
    }
    return L;
  }

  Vec gradient(const Vec& z) const { return linearize(z).gradient; }

  /// Minimizer of the Gauss-Newton model with the `fixed` components of z held
  /// at zero step, by a backward Riccati sweep over the stages.
  Vec newton_direction(const Linearization& L, const std::vector<char>& fixed) const {
    std::vector<Vec> kff(N_);
    std::vector<Mat> Kfb(N_);
    Mat V = L.WN;
    Vec v = L.qN;
    const Mat& K = K_;
    for (int i = N_ - 1; i >= 0; --i) {
      const Stage& s = L.stages[i];
      Mat At = s.A;
      Mat Wxx = s.Wxx;
      Mat Wzx = s.Wux;
      Vec qx = s.qx;
      if (prestab_) {
        At -= s.B * K;
        Wxx += -K.transpose() * s.Wux - s.Wux.transpose() * K + K.transpose() * s.Wuu * K;
        Wzx -= s.Wuu * K;
        qx -= K.transpose() * s.qu;
      }
      const Mat VA = V * At;
      const Mat Qxx = Wxx + At.transpose() * VA;
      const Mat Qzx = Wzx + s.B.transpose() * VA;
      const Mat Qzz = s.Wuu + s.B.transpose() * V * s.B;
      const Vec qxx = qx + At.transpose() * v;
      const Vec qz = s.qu + s.B.transpose() * v;

      std::vector<Eigen::Index> free;
      for (Eigen::Index j = 0; j < m_; ++j) {
        if (!fixed[i * m_ + j]) free.push_back(j);
      }
      kff[i] = Vec::Zero(m_);
      Kfb[i] = Mat::Zero(m_, n_);
      if (free.empty()) {
        V = Qxx;
        v = qxx;
      } else {
        const Eigen::Index f = static_cast<Eigen::Index>(free.size());
        Mat QzzF(f, f), QzxF(f, n_);
        Vec qzF(f);
        for (Eigen::Index a = 0; a < f; ++a) {
          qzF[a] = qz[free[a]];
          QzxF.row(a) = Qzx.row(free[a]);
          for (Eigen::Index b = 0; b < f; ++b) QzzF(a, b) = Qzz(free[a], free[b]);
        }
        const Eigen::LDLT<Mat> ldlt(QzzF);
        const Vec kF = -ldlt.solve(qzF);
        const Mat KF = -ldlt.solve(QzxF);
        for (Eigen::Index a = 0; a < f; ++a) {
          kff[i][free[a]] = kF[a];
          Kfb[i].row(free[a]) = KF.row(a);
        }
        V = Qxx + QzxF.transpose() * KF;
        v = qxx + QzxF.transpose() * kF;
      }
      V = 0.5 * (V + V.transpose());
    }
    Vec d(size());
    Vec dx = Vec::Zero(n_);
    for (int i = 0; i < N_; ++i) {
      const Stage& s = L.stages[i];
      const Vec dz = kff[i] + Kfb[i] * dx;
      d.segment(i * m_, m_) = dz;
      Mat At = s.A;
      if (prestab_) At -= s.B * K;
      dx = At * dx + s.B * dz;
    }
    return d;
  }

  const OcpProblem& problem() const { return p_; }

 private:
  double phr(double g, double lam) const {
    const double t = std::max(0.0, lam + 2.0 * rho * g);
    return (t * t - lam * lam) / (4.0 * rho);
  }

  Eigen::Index state_offset(int i) const { return 2 * (i - 1) * n_; }
  Eigen::Index control_offset(int i) const { return 2 * i * m_; }

  void add_box_terms(const Vec& y, const Box& box, const Vec& lam, Eigen::Index offset, Mat& W,
                     Vec& q) const {
    for (Eigen::Index j = 0; j < y.size(); ++j) {
      const double up = lam[offset + 2 * j] + 2.0 * rho * (y[j] - box.upper[j] + backoff);
      const double lo = lam[offset + 2 * j + 1] + 2.0 * rho * (box.lower[j] - y[j] + backoff);
      if (up > 0.0) {
        q[j] += up;
        W(j, j) += 2.0 * rho;
      }
      if (lo > 0.0) {
        q[j] -= lo;
        W(j, j) += 2.0 * rho;
      }
    }
  }

  // Calls fn(g, lambda) for every constraint g <= 0; lambda is writable when
  // `self` is non-const.
  template <typename Self, typename Fn>
  static void visit_constraints(Self& self, const Trajectory& t, Fn&& fn) {
    const OcpProblem& p = self.p_;
    const Box& xb = p.model.state_box();
    for (int i = 1; i <= self.N_; ++i) {
      const Vec& x = t.states[i];
      const Eigen::Index off = self.state_offset(i);
      for (Eigen::Index j = 0; j < self.n_; ++j) {
        fn(x[j] - xb.upper[j] + self.backoff, self.lam_x_[off + 2 * j]);
        fn(xb.lower[j] - x[j] + self.backoff, self.lam_x_[off + 2 * j + 1]);
      }
    }
    if (self.prestab_) {
      const Box& ub = p.model.control_box();
      for (int i = 0; i < self.N_; ++i) {
        const Vec& u = t.controls[i];
        const Eigen::Index off = self.control_offset(i);
        for (Eigen::Index j = 0; j < self.m_; ++j) {
          fn(u[j] - ub.upper[j] + self.backoff, self.lam_u_[off + 2 * j]);
          fn(ub.lower[j] - u[j] + self.backoff, self.lam_u_[off + 2 * j + 1]);
        }
      }
    }
    fn(p.terminal.cost(t.states[self.N_]) - p.terminal.level() + self.backoff, self.lam_terminal);
  }

  const OcpProblem& p_;
  int N_;
  Eigen::Index n_;
  Eigen::Index m_;
  Mat K_;
  bool prestab_;
  Vec lam_x_;
  Vec lam_u_;
};

namespace detail {

struct LocalResult {
  Vec z;
  int iterations = 0;
  double stationarity = std::numeric_limits<double>::infinity();
};

// Projected Newton with Armijo backtracking along the projection arc; falls
// back to the projected gradient when the Newton step fails to descend.
inline LocalResult minimize_augmented(const ShootingObjective& obj, Vec z, const OcpOptions& opts) {
  const OcpProblem& p = obj.problem();
  const Eigen::Index m = p.model.control_dim();
  const bool project = !obj.prestabilized();
  const Box& ub = p.model.control_box();
  auto proj = [&](Vec w) {
    if (project) {
      for (Eigen::Index k = 0; k < w.size(); ++k) {
        w[k] = std::clamp(w[k], ub.lower[k % m], ub.upper[k % m]);
      }
    }
    return w;
  };
  auto trial_value = [&](const Vec& w) {
    try {
      return obj.value(w);
    } catch (const NumericalError&) {
      return std::numeric_limits<double>::infinity();
    }
  };

  LocalResult res;
  z = proj(std::move(z));
  int flat = 0;  // consecutive accepted steps without a strict decrease
  for (int it = 0; it < opts.max_iterations; ++it) {
    const ShootingObjective::Linearization L = obj.linearize(z);
    const Vec& g = L.gradient;
    const Vec pg = proj(z - g) - z;
    res.stationarity = pg.lpNorm<Eigen::Infinity>();
    res.iterations = it;
    if (res.stationarity <= opts.tolerance) break;

    const double eps = std::min(1e-6, res.stationarity);
    std::vector<char> fixed(z.size(), 0);
    if (project) {
      for (Eigen::Index k = 0; k < z.size(); ++k) {
        const double lo = ub.lower[k % m], hi = ub.upper[k % m];
        fixed[k] = (z[k] <= lo + eps && g[k] > 0.0) || (z[k] >= hi - eps && g[k] < 0.0);
      }
    }
    Vec d = obj.newton_direction(L, fixed);
    for (Eigen::Index k = 0; k < z.size(); ++k) {
      if (fixed[k]) d[k] = -g[k];
    }

    bool accepted = false;
    for (int attempt = 0; attempt < 2 && !accepted; ++attempt) {
      if (attempt == 1) d = -g;
      double alpha = 1.0;
      for (int bt = 0; bt < opts.max_backtracks; ++bt, alpha *= opts.armijo_shrink) {
        const Vec zt = proj(z + alpha * d);
        const double decrease = g.dot(zt - z);
        if (!(decrease < 0.0)) {
          if (bt == 0 && attempt == 0) break;  // Newton direction is not a descent direction
          continue;
        }
        const double vt = trial_value(zt);
        if (vt <= L.value + opts.armijo_c1 * decrease) {
          z = zt;
          accepted = true;
          flat = vt < L.value ? 0 : flat + 1;
          break;
        }
      }
    }
    res.iterations = it + 1;
    if (!accepted || flat >= 3) break;
  }
  res.z = std::move(z);
  return res;
}

}  // namespace detail

/// Solve the weighted OCP by penalized single shooting with multi-start.
/// The warm start, when supplied, is always kept as a fallback: the returned
/// value never exceeds the value of a feasible warm start.
inline OcpSolution solve(const OcpProblem& problem,
                         const std::optional<std::vector<Vec>>& warm_start = std::nullopt,
                         const OcpOptions& opts = {}, const std::optional<DualHint>& dual = {}) {
  problem.validate();
  const int N = problem.horizon;
  const Eigen::Index m = problem.model.control_dim();
  if (warm_start && static_cast<int>(warm_start->size()) != N) {
    throw InvalidArgument("solve: warm start length differs from horizon");
  }

  Mat gain;
  if (opts.prestabilize) {
    if (!problem.terminal.lq_gain()) {
      throw InvalidArgument("solve: prestabilization needs an LQ terminal gain");
    }
    gain = *problem.terminal.lq_gain();
  }

  // Starts in control space: warm (or all-ubar), all-ubar, bang.
  const Vec& ubar = problem.model.equilibrium_control();
  std::vector<std::vector<Vec>> starts;
  if (warm_start) starts.push_back(*warm_start);
  starts.emplace_back(N, ubar);
  {
    const Box& ub = problem.model.control_box();
    Vec dir;
    if (problem.terminal.lq_gain()) {
      dir = -(*problem.terminal.lq_gain()) *
            (problem.initial_state - problem.model.equilibrium_state());
    } else {
      dir = Vec::Constant(m, -(problem.initial_state - problem.model.equilibrium_state()).sum());
    }
    Vec bang = ubar;
    for (Eigen::Index j = 0; j < m; ++j) {
      if (dir[j] > 0.0) bang[j] = ub.upper[j];
      if (dir[j] < 0.0) bang[j] = ub.lower[j];
    }
    starts.emplace_back(N, bang);
  }
  auto same = [](const std::vector<Vec>& a, const std::vector<Vec>& b) {
    for (std::size_t i = 0; i < a.size(); ++i) {
      if (a[i] != b[i]) return false;
    }
    return true;
  };
  std::vector<std::vector<Vec>> unique;
  for (auto& s : starts) {
    if (static_cast<int>(unique.size()) >= std::max(1, opts.multistart)) break;
    bool dup = false;
    for (const auto& u : unique) dup = dup || same(u, s);
    if (!dup) unique.push_back(std::move(s));
  }

  OcpSolution best;
  best.status = OcpStatus::infeasible;
  double best_violation = std::numeric_limits<double>::infinity();
  int completed_starts = 0;
  std::string numerical_failure;
  for (std::size_t s = 0; s < unique.size(); ++s) {
    ShootingObjective obj(problem, gain);
    obj.rho = opts.penalty_initial;
    obj.backoff = 10.0 * opts.feasibility_tolerance;
    int increases = 0;
    if (dual && warm_start && s == 0) {
      while (obj.rho < dual->penalty && increases + 1 < opts.penalty_rounds) {
        obj.rho *= opts.penalty_growth;
        ++increases;
      }
      obj.lam_terminal = std::max(0.0, dual->terminal_multiplier);
    }
    Vec z;
    detail::LocalResult local;
    int total_iterations = 0;
    OcpSolution cand;
    try {
      z = obj.encode(unique[s]);
      // Multipliers move every round; rho follows the schedule only when the
      // residual fails to shrink fourfold.
      double previous = std::numeric_limits<double>::infinity();
      for (int round = 0; round < opts.max_outer_rounds; ++round) {
        local = detail::minimize_augmented(obj, z, opts);
        total_iterations += local.iterations;
        z = local.z;
        const ShootingObjective::Trajectory t = obj.rollout(z);
        const double residual = obj.al_residual(t);
        if (residual <= opts.feasibility_tolerance) break;
        obj.update_multipliers(t);
        if (residual > 0.25 * previous && increases + 1 < opts.penalty_rounds) {
          obj.rho *= opts.penalty_growth;
          ++increases;
        }
        previous = residual;
      }
      cand = evaluate_candidate(problem, obj.rollout(z).controls, opts.feasibility_tolerance);
    } catch (const NumericalError& e) {
      if (numerical_failure.empty()) numerical_failure = e.what();
      continue;
    }
    ++completed_starts;
    cand.iterations = total_iterations;
    cand.kkt_residual = local.stationarity;
    cand.start_index = static_cast<int>(s);
    cand.penalty = obj.rho;
    cand.terminal_multiplier = obj.lam_terminal;
    if (cand.feasible) {
      if (best.status == OcpStatus::infeasible || cand.value < best.value) {
        best = std::move(cand);
        best.status = OcpStatus::solved;
      }
    } else if (best.status == OcpStatus::infeasible) {
      const double viol = -std::min({cand.terminal_margin, cand.state_box_margin,
                                     cand.control_box_margin});
      if (viol < best_violation) {
        best_violation = viol;
        best = std::move(cand);
      }
    }
  }

  if (warm_start) {
    OcpSolution warm;
    try {
      warm = evaluate_candidate(problem, *warm_start, opts.feasibility_tolerance);
    } catch (const NumericalError&) {
      warm.feasible = false;
    }
    if (warm.feasible && (best.status == OcpStatus::infeasible || warm.value < best.value)) {
      warm.iterations = best.iterations;
      warm.kkt_residual = best.kkt_residual;
      best = std::move(warm);
      best.status = OcpStatus::warm_candidate;
      best.start_index = -1;
    }
  }
  if (completed_starts == 0 && best.status == OcpStatus::infeasible) {
    throw NumericalError("solve: every start failed: " + numerical_failure);
  }
  best.converged = best.status != OcpStatus::infeasible;
  if (best.status == OcpStatus::infeasible) best.feasible = false;
  return best;
}

}  // namespace qsmpc
