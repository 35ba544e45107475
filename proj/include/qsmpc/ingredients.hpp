#pragma once

#include <qsmpc/core.hpp>
#include <qsmpc/dynamics.hpp>

#include <algorithm>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <random>
#include <sstream>
#include <utility>

namespace qsmpc {

/// First and second derivatives of a stage cost at (x, u). The second-order
/// blocks must form a positive semidefinite matrix; the shooting solver uses
/// them as its Gauss-Newton curvature.
struct StageCostDerivatives {
  Vec lx;
  Vec lu;
  Mat lxx;
  Mat luu;
  Mat lux;
};

/// Stage cost l(x, u) >= 0, zero only at the equilibrium pair, and minimal over
/// u at the equilibrium control.
class StageCost {
 public:
  using ValueFn = std::function<double(const Vec&, const Vec&)>;
  using DerivativeFn = std::function<StageCostDerivatives(const Vec&, const Vec&)>;
  using MinimizerFn = std::function<Vec(const Vec&)>;

  StageCost(ValueFn value, DerivativeFn derivatives, MinimizerFn control_minimizer)
      : value_(std::move(value)),
        derivatives_(std::move(derivatives)),
        minimizer_(std::move(control_minimizer)) {
    if (!value_ || !minimizer_) throw InvalidArgument("StageCost: value and minimizer required");
  }

  double evaluate(const Vec& x, const Vec& u) const { return value_(x, u); }

  StageCostDerivatives derivatives(const Vec& x, const Vec& u) const {
    if (!derivatives_) throw InvalidArgument("StageCost: no derivatives supplied");
    return derivatives_(x, u);
  }
  bool has_derivatives() const { return static_cast<bool>(derivatives_); }

  // argmin_a l(x, a)
  Vec control_minimizer_at(const Vec& x) const { return minimizer_(x); }

  // Diagonal weights when the cost is sum_i wx_i x_i^2 + sum_j wu_j u_j^2.
  const std::optional<Vec>& state_weights() const { return state_weights_; }
  const std::optional<Vec>& control_weights() const { return control_weights_; }

 private:
  friend StageCost make_quadratic_stage_cost(const Vec&, const Vec&);

  ValueFn value_;
  DerivativeFn derivatives_;
  MinimizerFn minimizer_;
  std::optional<Vec> state_weights_;
  std::optional<Vec> control_weights_;
};

inline StageCost make_quadratic_stage_cost(const Vec& state_weights, const Vec& control_weights) {
  if (state_weights.size() == 0 || control_weights.size() == 0) {
    throw InvalidArgument("quadratic stage cost: empty weight vector");
  }
  if ((state_weights.array() < 0.0).any() || !state_weights.allFinite()) {
    throw InvalidArgument("quadratic stage cost: state weights must be nonnegative");
  }
  if ((control_weights.array() <= 0.0).any() || !control_weights.allFinite()) {
    throw InvalidArgument("quadratic stage cost: control weights must be strictly positive");
  }
  const Vec wx = state_weights;
  const Vec wu = control_weights;
  StageCost cost(
      [wx, wu](const Vec& x, const Vec& u) {
        return (wx.array() * x.array().square()).sum() + (wu.array() * u.array().square()).sum();
      },
      [wx, wu](const Vec& x, const Vec& u) {
        StageCostDerivatives d;
        d.lx = 2.0 * wx.cwiseProduct(x);
        d.lu = 2.0 * wu.cwiseProduct(u);
        d.lxx = (2.0 * wx).asDiagonal();
        d.luu = (2.0 * wu).asDiagonal();
        d.lux = Mat::Zero(wu.size(), wx.size());
        return d;
      },
      [n = wu.size()](const Vec&) { return Vec::Zero(n); });
  cost.state_weights_ = wx;
  cost.control_weights_ = wu;
  return cost;
}

/// Result of the fixed-point discrete algebraic Riccati iteration.
struct RiccatiSolution {
  Mat P;
  Mat K;  // u = -K x
  int iterations = 0;
  double residual = 0.0;
};

inline double riccati_residual(const Mat& A, const Mat& B, const Mat& Q, const Mat& R,
                               const Mat& P) {
  const Mat BtP = B.transpose() * P;
  const Mat S = R + BtP * B;
  const Mat rhs =
      A.transpose() * P * A - A.transpose() * P * B * S.ldlt().solve(BtP * A) + Q;
  return (P - rhs).lpNorm<Eigen::Infinity>();
}

// P <- Q + A'PA - A'PB (R + B'PB)^-1 B'PA starting from P = Q.
inline RiccatiSolution solve_dare(const Mat& A, const Mat& B, const Mat& Q, const Mat& R,
                                  int max_iterations = 10000, double tolerance = 1e-12) {
  if (A.rows() != A.cols() || B.rows() != A.rows() || Q.rows() != A.rows() ||
      R.rows() != B.cols()) {
    throw InvalidArgument("solve_dare: inconsistent dimensions");
  }
  Mat P = Q;
  double step = std::numeric_limits<double>::infinity();
  int it = 0;
  for (; it < max_iterations && step > tolerance; ++it) {
    const Mat BtP = B.transpose() * P;
    const Mat S = R + BtP * B;
    Mat next = Q + A.transpose() * P * A - (BtP * A).transpose() * S.ldlt().solve(BtP * A);
    next = 0.5 * (next + next.transpose());
    if (!next.allFinite()) break;
    step = (next - P).lpNorm<Eigen::Infinity>();
    P = std::move(next);
  }
  const double residual = riccati_residual(A, B, Q, R, P);
  if (!(step <= tolerance)) {
    std::ostringstream os;
    os << "solve_dare: no convergence after " << it << " iterations (last increment " << step
       << ", residual " << residual << ")";
    throw NumericalError(os.str());
  }
  Eigen::LLT<Mat> llt(P);
  if (llt.info() != Eigen::Success) {
    throw NumericalError("solve_dare: Riccati solution is not positive definite");
  }
  const Mat BtP = B.transpose() * P;
  RiccatiSolution sol;
  sol.K = (R + BtP * B).ldlt().solve(BtP * A);
  sol.P = std::move(P);
  sol.iterations = it;
  sol.residual = residual;
  return sol;
}

/// Diagnostics gathered while validating the terminal level set.
struct TerminalDiagnostics {
  double requested_level = 0.0;
  int level_halvings = 0;
  int riccati_iterations = 0;
  double riccati_residual = 0.0;
  int clipped_samples = 0;
  // Empirical range of (F(x) - F(x+)) / l(x, mu_F(x)) over the validation samples.
  double alpha_min = std::numeric_limits<double>::quiet_NaN();
  double alpha_max = std::numeric_limits<double>::quiet_NaN();
};

/// Terminal cost F, local controller mu_F and the level set X_f = {F <= level}.
class TerminalIngredients {
 public:
  using CostFn = std::function<double(const Vec&)>;
  using GradientFn = std::function<Vec(const Vec&)>;
  using HessianFn = std::function<Mat(const Vec&)>;
  using ControllerFn = std::function<Vec(const Vec&)>;

  // Pluggable analytic terminal cost. The Hessian must be positive semidefinite.
  TerminalIngredients(CostFn cost, GradientFn gradient, HessianFn hessian, ControllerFn controller,
                      double level, Box control_box)
      : cost_(std::move(cost)),
        gradient_(std::move(gradient)),
        hessian_(std::move(hessian)),
        controller_(std::move(controller)),
        level_(level),
        control_box_(std::move(control_box)) {
    if (!cost_ || !gradient_ || !hessian_ || !controller_) {
      throw InvalidArgument("TerminalIngredients: cost, derivatives and controller required");
    }
    if (!(level_ > 0.0) || !std::isfinite(level_)) {
      throw InvalidArgument("TerminalIngredients: level must be positive");
    }
  }

  // F(x) = x'Px, mu_F(x) = -Kx clipped to the control box.
  static TerminalIngredients quadratic(const Mat& P, const Mat& K, double level,
                                       const Box& control_box) {
    TerminalIngredients ti([P](const Vec& x) { return x.dot(P * x); },
                           [P](const Vec& x) -> Vec { return 2.0 * (P * x); },
                           [P](const Vec&) -> Mat { return 2.0 * P; },
                           [K](const Vec& x) -> Vec { return -(K * x); }, level, control_box);
    ti.quadratic_matrix_ = P;
    ti.lq_gain_ = K;
    return ti;
  }

  double cost(const Vec& x) const { return cost_(x); }
  Vec gradient(const Vec& x) const { return gradient_(x); }
  Mat hessian(const Vec& x) const { return hessian_(x); }

  Vec local_control(const Vec& x) const { return control_box_.clamp(controller_(x)); }
  bool local_control_clips(const Vec& x) const { return !control_box_.contains(controller_(x)); }

  double level() const { return level_; }
  bool contains(const Vec& x, double tol = 0.0) const { return cost_(x) <= level_ + tol; }
  double margin(const Vec& x) const { return level_ - cost_(x); }

  const std::optional<Mat>& quadratic_matrix() const { return quadratic_matrix_; }
  const std::optional<Mat>& lq_gain() const { return lq_gain_; }
  const Box& control_box() const { return control_box_; }

  TerminalDiagnostics diagnostics;

  // Same ingredients with F (and the level) scaled by beta; mu_F unchanged.
  TerminalIngredients scaled(double beta) const {
    TerminalIngredients ti(
        [f = cost_, beta](const Vec& x) { return beta * f(x); },
        [g = gradient_, beta](const Vec& x) -> Vec { return beta * g(x); },
        [h = hessian_, beta](const Vec& x) -> Mat { return beta * h(x); }, controller_,
        beta * level_, control_box_);
    if (quadratic_matrix_) ti.quadratic_matrix_ = beta * *quadratic_matrix_;
    ti.lq_gain_ = lq_gain_;
    ti.diagnostics = diagnostics;
    return ti;
  }

 private:
  CostFn cost_;
  GradientFn gradient_;
  HessianFn hessian_;
  ControllerFn controller_;
  double level_;
  Box control_box_;
  std::optional<Mat> quadratic_matrix_;
  std::optional<Mat> lq_gain_;
};

/// Decay ratio (F(x) - F(f(x, mu_F(x)))) / l(x, mu_F(x)).
inline double decay_ratio(const TerminalIngredients& ti, const StageCost& cost,
                          const SystemModel& model, const Vec& x) {
  const Vec u = ti.local_control(x);
  const double stage = cost.evaluate(x, u);
  if (!(stage >= 1e-14)) throw NumericalError("decay_ratio: equilibrium degenerate ratio");
  return (ti.cost(x) - ti.cost(model.step(x, u))) / stage;
}

struct LqTerminalOptions {
  int validation_samples = 1000;
  int max_level_halvings = 6;
  std::uint64_t seed = 0x5eed2024ULL;
  int riccati_max_iterations = 10000;
  double riccati_tolerance = 1e-12;
};

namespace detail {

// Uniform samples of {x'Px <= level}; every fourth sample lies on the boundary.
inline std::vector<Vec> sample_ellipsoid(const Mat& P, double level, int count,
                                         std::uint64_t seed) {
  const Eigen::Index n = P.rows();
  const Mat L = Eigen::LLT<Mat>(P).matrixL();
  const Mat Linv_t = L.transpose().inverse();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  std::vector<Vec> out;
  out.reserve(count);
  for (int s = 0; s < count; ++s) {
    Vec z(n);
    for (Eigen::Index i = 0; i < n; ++i) z[i] = normal(rng);
    const double r = (s % 4 == 3) ? 1.0 : std::pow(uniform(rng), 1.0 / static_cast<double>(n));
    z *= r / z.norm();
    out.push_back(std::sqrt(level) * (Linv_t * z));
  }
  return out;
}

}  // namespace detail

/// Local LQ design around the equilibrium: linearize by central differences,
/// solve the Riccati equation for the quadratic stage weights, and validate
/// X_f on samples (positive invariance, strict decay, inclusion in the state
/// box), halving the level on failure.
inline TerminalIngredients lq_terminal_ingredients(const SystemModel& model, const StageCost& cost,
                                                   double level,
                                                   const LqTerminalOptions& opts = {}) {
  if (!(level > 0.0)) throw InvalidArgument("lq_terminal_ingredients: level must be positive");
  if (!cost.state_weights() || !cost.control_weights()) {
    throw InvalidArgument("lq_terminal_ingredients: stage cost must be diagonal quadratic");
  }
  const Jacobians lin =
      model.finite_difference_jacobian(model.equilibrium_state(), model.equilibrium_control());
  const Mat Q = cost.state_weights()->asDiagonal();
  const Mat R = cost.control_weights()->asDiagonal();
  const RiccatiSolution dare =
      solve_dare(lin.A, lin.B, Q, R, opts.riccati_max_iterations, opts.riccati_tolerance);

  const Mat Pinv = dare.P.inverse();
  double current = level;
  for (int halvings = 0; halvings <= opts.max_level_halvings; ++halvings) {
    TerminalIngredients ti =
        TerminalIngredients::quadratic(dare.P, dare.K, current, model.control_box());
    ti.diagnostics.requested_level = level;
    ti.diagnostics.level_halvings = halvings;
    ti.diagnostics.riccati_iterations = dare.iterations;
    ti.diagnostics.riccati_residual = dare.residual;

    bool ok = true;
    // Ellipsoid extent along each axis must stay inside the state box.
    const Vec& xe = model.equilibrium_state();
    for (Eigen::Index j = 0; j < Pinv.rows() && ok; ++j) {
      const double reach = std::sqrt(current * Pinv(j, j));
      ok = xe[j] - reach >= model.state_box().lower[j] && xe[j] + reach <= model.state_box().upper[j];
    }
    double amin = std::numeric_limits<double>::infinity();
    double amax = -std::numeric_limits<double>::infinity();
    int clipped = 0;
    if (ok) {
      for (const Vec& dx : detail::sample_ellipsoid(dare.P, current, opts.validation_samples,
                                                    opts.seed)) {
        const Vec x = xe + dx;
        if (ti.local_control_clips(x)) ++clipped;
        const Vec u = ti.local_control(x);
        const Vec next = model.step(x, u);
        const double F = ti.cost(x);
        const double Fn = ti.cost(next);
        if (F > 0.0 && !(Fn < F)) ok = false;
        if (!ti.contains(next)) ok = false;
        const double stage = cost.evaluate(x, u);
        if (stage > 1e-14) {
          amin = std::min(amin, (F - Fn) / stage);
          amax = std::max(amax, (F - Fn) / stage);
        }
        if (!ok) break;
      }
    }
    if (ok) {
      ti.diagnostics.clipped_samples = clipped;
      ti.diagnostics.alpha_min = amin;
      ti.diagnostics.alpha_max = amax;
      return ti;
    }
    current *= 0.5;
  }
  std::ostringstream os;
  os << "lq_terminal_ingredients: terminal set not invariant after " << opts.max_level_halvings
     << " halvings of level " << level;
  throw NumericalError(os.str());
}

}  // namespace qsmpc
