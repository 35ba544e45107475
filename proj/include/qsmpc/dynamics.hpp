#pragma once

#include <qsmpc/core.hpp>

#include <cmath>
#include <functional>
#include <numbers>
#include <string>
#include <utility>

namespace qsmpc {

struct Jacobians {
  Mat A;  // d step / d x
  Mat B;  // d step / d u
};

/// Discrete-time plant x+ = f(x, u) with admissible boxes and its unique
/// equilibrium. Immutable once constructed.
class SystemModel {
 public:
  using StepFn = std::function<Vec(const Vec&, const Vec&)>;
  using JacobianFn = std::function<Jacobians(const Vec&, const Vec&)>;

  static constexpr double kEquilibriumTolerance = 1e-9;
  static constexpr double kFiniteDifferenceStep = 1e-6;

  // An empty `jacobian` falls back to central differences of `step`.
  SystemModel(std::string name, StepFn step, JacobianFn jacobian, Box state_box,
              Box control_box, Vec equilibrium_state, Vec equilibrium_control)
      : name_(std::move(name)),
        step_(std::move(step)),
        jacobian_(std::move(jacobian)),
        state_box_(std::move(state_box)),
        control_box_(std::move(control_box)),
        x_eq_(std::move(equilibrium_state)),
        u_eq_(std::move(equilibrium_control)) {
    if (!step_) throw InvalidArgument("SystemModel: step map is empty");
    if (state_box_.dim() == 0 || control_box_.dim() == 0) {
      throw InvalidArgument("SystemModel: state and control dimensions must be positive");
    }
    if (x_eq_.size() != state_box_.dim() || u_eq_.size() != control_box_.dim()) {
      throw InvalidArgument("SystemModel: equilibrium dimensions do not match the boxes");
    }
    if (!state_box_.strictly_contains(x_eq_)) {
      throw InvalidArgument("SystemModel: equilibrium state not strictly inside the state box");
    }
    if (!control_box_.strictly_contains(u_eq_)) {
      throw InvalidArgument("SystemModel: equilibrium control not strictly inside the control box");
    }
    const double residual = (this->step(x_eq_, u_eq_) - x_eq_).lpNorm<Eigen::Infinity>();
    if (!(residual <= kEquilibriumTolerance)) {
      std::ostringstream os;
      os << "SystemModel '" << name_ << "': equilibrium residual " << residual
         << " exceeds " << kEquilibriumTolerance;
      throw InvalidArgument(os.str());
    }
  }

  const std::string& name() const { return name_; }
  Eigen::Index state_dim() const { return state_box_.dim(); }
  Eigen::Index control_dim() const { return control_box_.dim(); }
  const Box& state_box() const { return state_box_; }
  const Box& control_box() const { return control_box_; }
  const Vec& equilibrium_state() const { return x_eq_; }
  const Vec& equilibrium_control() const { return u_eq_; }

  Vec step(const Vec& x, const Vec& u) const {
    Vec next = step_(x, u);
    if (!next.allFinite()) {
      throw NumericalError("SystemModel '" + name_ + "': non-finite successor from x=" +
                           to_string(x) + ", u=" + to_string(u));
    }
    return next;
  }

  Jacobians jacobian(const Vec& x, const Vec& u) const {
    if (jacobian_) return jacobian_(x, u);
    return finite_difference_jacobian(x, u);
  }

  // Central differences with the fixed linearization step.
  Jacobians finite_difference_jacobian(const Vec& x, const Vec& u) const {
    const double h = kFiniteDifferenceStep;
    Jacobians J{Mat(state_dim(), state_dim()), Mat(state_dim(), control_dim())};
    for (Eigen::Index j = 0; j < state_dim(); ++j) {
      Vec xp = x, xm = x;
      xp[j] += h;
      xm[j] -= h;
      J.A.col(j) = (step_(xp, u) - step_(xm, u)) / (2.0 * h);
    }
    for (Eigen::Index j = 0; j < control_dim(); ++j) {
      Vec up = u, um = u;
      up[j] += h;
      um[j] -= h;
      J.B.col(j) = (step_(x, up) - step_(x, um)) / (2.0 * h);
    }
    return J;
  }

 private:
  std::string name_;
  StepFn step_;
  JacobianFn jacobian_;
  Box state_box_;
  Box control_box_;
  Vec x_eq_;
  Vec u_eq_;
};

/// Continuous-time right-hand side plus sampling time for explicit Euler.
struct EulerSpec {
  std::function<Vec(const Vec&, const Vec&)> continuous_rhs;
  // Optional analytic d rhs / d(x, u); empty means central differences.
  std::function<Jacobians(const Vec&, const Vec&)> rhs_jacobian;
  double dt = 0.0;
};

inline SystemModel euler_discretize(const EulerSpec& spec, Box state_box, Box control_box,
                                    Vec equilibrium_state, Vec equilibrium_control,
                                    std::string name = "euler") {
  if (!(spec.dt > 0.0) || !std::isfinite(spec.dt)) {
    throw InvalidArgument("euler_discretize: dt must be positive");
  }
  if (!spec.continuous_rhs) throw InvalidArgument("euler_discretize: rhs is empty");
  const double dt = spec.dt;
  auto rhs = spec.continuous_rhs;
  SystemModel::StepFn step = [rhs, dt](const Vec& x, const Vec& u) -> Vec {
    return x + dt * rhs(x, u);
  };
  SystemModel::JacobianFn jac;
  if (spec.rhs_jacobian) {
    auto rhs_jac = spec.rhs_jacobian;
    jac = [rhs_jac, dt](const Vec& x, const Vec& u) -> Jacobians {
      Jacobians J = rhs_jac(x, u);
      J.A *= dt;
      J.A.diagonal().array() += 1.0;
      J.B *= dt;
      return J;
    };
  }
  return SystemModel(std::move(name), std::move(step), std::move(jac), std::move(state_box),
                     std::move(control_box), std::move(equilibrium_state),
                     std::move(equilibrium_control));
}

struct MassSpringDamperParams {
  double mass = 1.0;
  double damping = 0.2;
  double stiffness = 1.0;
  double dt = 0.7;
  double state_bound = 10.0;
  double control_bound = 10.0;
};

// m x'' + d x' + s x = u, state (position, velocity).
inline SystemModel make_mass_spring_damper(const MassSpringDamperParams& p = {}) {
  EulerSpec spec;
  spec.dt = p.dt;
  spec.continuous_rhs = [p](const Vec& x, const Vec& u) -> Vec {
    Vec dx(2);
    dx << x[1], (u[0] - p.damping * x[1] - p.stiffness * x[0]) / p.mass;
    return dx;
  };
  spec.rhs_jacobian = [p](const Vec&, const Vec&) -> Jacobians {
    Jacobians J{Mat(2, 2), Mat(2, 1)};
    J.A << 0.0, 1.0, -p.stiffness / p.mass, -p.damping / p.mass;
    J.B << 0.0, 1.0 / p.mass;
    return J;
  };
  return euler_discretize(spec, Box::symmetric(2, p.state_bound),
                          Box::symmetric(1, p.control_bound), Vec::Zero(2), Vec::Zero(1),
                          "msd");
}

struct PrimbsParams {
  double dt = 0.1;
  double state_bound = 20.0;
  double control_bound = 100.0;
};

// x1' = x2
// x2' = -x1 (pi/2 + atan(5 x1)) - 5 x1^2 / (2 (1 + 25 x1^2)) + 4 x2 + 3 u
inline SystemModel make_primbs_system(const PrimbsParams& p = {}) {
  EulerSpec spec;
  spec.dt = p.dt;
  spec.continuous_rhs = [](const Vec& x, const Vec& u) -> Vec {
    const double x1 = x[0];
    const double sq = x1 * x1;
    Vec dx(2);
    dx << x[1], -x1 * (std::numbers::pi / 2.0 + std::atan(5.0 * x1)) -
                    5.0 * sq / (2.0 * (1.0 + 25.0 * sq)) + 4.0 * x[1] + 3.0 * u[0];
    return dx;
  };
  spec.rhs_jacobian = [](const Vec& x, const Vec&) -> Jacobians {
    const double x1 = x[0];
    const double q = 1.0 + 25.0 * x1 * x1;
    // d/dx1 of the x1 terms; the rational term differentiates to 5 x1 / q^2.
    const double d21 = -(std::numbers::pi / 2.0 + std::atan(5.0 * x1)) - 5.0 * x1 / q -
                       5.0 * x1 / (q * q);
    Jacobians J{Mat(2, 2), Mat(2, 1)};
    J.A << 0.0, 1.0, d21, 4.0;
    J.B << 0.0, 3.0;
    return J;
  };
  return euler_discretize(spec, Box::symmetric(2, p.state_bound),
                          Box::symmetric(1, p.control_bound), Vec::Zero(2), Vec::Zero(1),
                          "primbs");
}

}  // namespace qsmpc
