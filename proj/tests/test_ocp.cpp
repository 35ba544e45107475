#include <qsmpc/ocp.hpp>

#include <gtest/gtest.h>

#include "ocp_instances.hpp"

#include <random>

using namespace qsmpc;
using instances::vec;

namespace {

struct Toy {
  SystemModel model = instances::scalar_integrator();
  StageCost cost = make_quadratic_stage_cost(vec({1}), vec({1}));
  TerminalIngredients terminal = lq_terminal_ingredients(model, cost, 40.0);
};

struct Msd {
  SystemModel model = make_mass_spring_damper();
  StageCost cost = make_quadratic_stage_cost(vec({1, 1}), vec({1}));
  TerminalIngredients terminal = lq_terminal_ingredients(model, cost, 0.1);
};

void expect_consistent(const OcpProblem& p, const OcpSolution& s) {
  ASSERT_EQ(static_cast<int>(s.controls.size()), p.horizon);
  ASSERT_EQ(static_cast<int>(s.states.size()), p.horizon + 1);
  EXPECT_EQ(s.states[0], p.initial_state);
  double value = 0.0;
  for (int i = 0; i < p.horizon; ++i) {
    EXPECT_LE((s.states[i + 1] - p.model.step(s.states[i], s.controls[i])).lpNorm<Eigen::Infinity>(),
              1e-12);
    value += p.coefficients[i] * p.cost.evaluate(s.states[i], s.controls[i]);
  }
  value += p.terminal.cost(s.states.back());
  EXPECT_NEAR(s.value, value, 1e-10);
  if (s.converged) {
    EXPECT_GE(s.terminal_margin, -1e-8);
    EXPECT_GE(s.state_box_margin, -1e-8);
    EXPECT_GE(s.control_box_margin, -1e-8);
  }
}

}  // namespace

TEST(Solve, ScalarToyClosedForm) {
  const Toy t;
  const double p = oracle::scalar_riccati(1, 1, 1, 1);
  const OcpProblem prob{t.model, t.cost, t.terminal, 1, CoefficientVector::constant(1, 1.0), vec({1})};
  const OcpSolution s = solve(prob);
  ASSERT_TRUE(s.converged);
  EXPECT_EQ(s.status, OcpStatus::solved);
  EXPECT_NEAR(s.controls[0][0], -0.6180339887498948, 1e-6);  // mpmath fixture
  EXPECT_NEAR(s.value, 1.6180339887498948, 1e-9);              // mpmath fixture
  EXPECT_NEAR(s.value, p, 1e-9);
  EXPECT_LE(s.kkt_residual, 1e-8);
  expect_consistent(prob, s);

  const OcpProblem doubled{t.model, t.cost, t.terminal, 1, CoefficientVector::constant(1, 2.0),
                           vec({1})};
  const OcpSolution s2 = solve(doubled);
  EXPECT_NEAR(s2.controls[0][0], -0.4472135954999579, 1e-6);  // mpmath fixture
  EXPECT_NEAR(s2.value, 2.894427190999916, 1e-9);
}

TEST(Solve, ScalarToyMatchesFineGrid) {
  const Toy t;
  const OcpProblem prob{t.model, t.cost, t.terminal, 1, CoefficientVector::constant(1, 1.0), vec({1})};
  double best = std::numeric_limits<double>::infinity(), arg = 0.0;
  for (int k = 0; k <= 200000; ++k) {
    const double u = -2.0 + 1e-5 * k;
    const double v = 1.0 + u * u + t.terminal.cost(vec({1.0 + u}));
    if (v < best) {
      best = v;
      arg = u;
    }
  }
  const OcpSolution s = solve(prob);
  EXPECT_NEAR(s.controls[0][0], arg, 1e-5);
  EXPECT_NEAR(s.value, best, 1e-8);
}

TEST(Solve, EquilibriumIsOptimal) {
  const Msd m;
  for (double c : {0.5, 1.0, 7.0}) {
    const OcpProblem prob{m.model, m.cost, m.terminal, 10, CoefficientVector::constant(10, c),
                          Vec::Zero(2)};
    const OcpSolution s = solve(prob);
    ASSERT_TRUE(s.converged);
    for (const Vec& u : s.controls) EXPECT_EQ(u, Vec::Zero(1));
    EXPECT_EQ(s.value, 0.0);
    EXPECT_EQ(s.terminal_margin, m.terminal.level());
  }
}

TEST(Solve, MatchesGridSearchOnRandomInstances) {
  int compared = 0;
  for (int index = 0; compared < 12 && index < 60; ++index) {
    const instances::Instance in = instances::make_instance(index);
    const instances::GridValue g = instances::grid_value(in);
    if (!(g.violation <= 1e-7)) continue;
    const OcpProblem prob = in.problem();
    const OcpSolution s = solve(prob);
    ASSERT_TRUE(s.converged) << in.label;
    EXPECT_NEAR(s.value, g.value, 1e-4 * std::max(1.0, std::abs(g.value))) << in.label;
    expect_consistent(prob, s);
    ++compared;
  }
  EXPECT_EQ(compared, 12);
}

TEST(Solve, AdjointGradientMatchesCentralDifferences) {
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> d(-1.0, 1.0);
  for (int index = 0; index < 18; ++index) {
    const instances::Instance in = instances::make_instance(index, 99);
    const OcpProblem prob = in.problem();
    for (bool prestab : {false, true}) {
      ShootingObjective obj(prob, prestab ? *in.terminal->lq_gain() : Mat());
      obj.rho = 100.0;
      obj.lam_terminal = 0.3;
      Vec z(obj.size());
      for (Eigen::Index k = 0; k < z.size(); ++k) z[k] = 2.0 * d(rng);
      const Vec g = obj.gradient(z);
      for (Eigen::Index k = 0; k < z.size(); ++k) {
        Vec zp = z, zm = z;
        zp[k] += 1e-6;
        zm[k] -= 1e-6;
        const double fd = (obj.value(zp) - obj.value(zm)) / 2e-6;
        EXPECT_NEAR(g[k], fd, 1e-5 * std::max(1.0, std::abs(fd))) << in.label << " k=" << k;
      }
    }
  }
}

TEST(Solve, WarmShiftIsNeverBeaten) {
  const Msd m;
  std::mt19937_64 rng(23);
  std::uniform_real_distribution<double> d(-1.0, 1.0);
  for (int s = 0; s < 8; ++s) {
    const Vec x0 = vec({d(rng), d(rng)});
    const CoefficientVector c = CoefficientVector::constant(10, 5.0);
    const OcpSolution first = solve({m.model, m.cost, m.terminal, 10, c, x0});
    ASSERT_TRUE(first.converged);
    const std::vector<Vec> shifted = warm_start_shift(first, m.terminal);
    const OcpProblem next{m.model, m.cost, m.terminal, 10, c, first.states[1]};
    const OcpSolution candidate = evaluate_candidate(next, shifted);
    EXPECT_TRUE(candidate.feasible);
    const OcpSolution second = solve(next, shifted);
    ASSERT_TRUE(second.converged);
    EXPECT_LE(second.value, candidate.value + 1e-10);
    expect_consistent(next, second);
  }
}

TEST(Solve, CoefficientAndTerminalScaling) {
  const Msd m;
  const Vec x0 = vec({0.6, -0.4});
  const TerminalIngredients scaled = m.terminal.scaled(3.0);
  Vec c(10);
  for (int i = 0; i < 10; ++i) c[i] = 1.0 + 0.3 * i;
  const OcpSolution a = solve({m.model, m.cost, m.terminal, 10, {c, CoefficientOrigin::initial}, x0});
  const OcpSolution b = solve({m.model, m.cost, scaled, 10, {3.0 * c, CoefficientOrigin::initial}, x0});
  ASSERT_TRUE(a.converged && b.converged);
  EXPECT_NEAR(b.value, 3.0 * a.value, 1e-8 * b.value);
  for (int i = 0; i < 10; ++i) EXPECT_NEAR(a.controls[i][0], b.controls[i][0], 1e-6);
}

TEST(Solve, Deterministic) {
  const Msd m;
  const OcpProblem prob{m.model, m.cost, m.terminal, 10, CoefficientVector::constant(10, 5.0),
                        vec({-0.8, 0.9})};
  const OcpSolution a = solve(prob), b = solve(prob);
  EXPECT_EQ(a.value, b.value);
  for (int i = 0; i < 10; ++i) EXPECT_EQ(a.controls[i], b.controls[i]);
}

TEST(Solve, InfeasibleIsReportedExplicitly) {
  const Msd m;
  const OcpProblem prob{m.model, m.cost, m.terminal, 1, CoefficientVector::constant(1, 1.0),
                        vec({9, 9})};
  const OcpSolution s = solve(prob);
  EXPECT_EQ(s.status, OcpStatus::infeasible);
  EXPECT_FALSE(s.converged);
  EXPECT_FALSE(s.feasible);
  EXPECT_LT(s.terminal_margin, 0.0);
}

TEST(Solve, NanDynamicsIsNumericalError) {
  SystemModel poisoned(
      "nan", [](const Vec& x, const Vec& u) -> Vec {
        if (x.isZero(0.0) && u.isZero(0.0)) return x;
        return Vec::Constant(1, std::numeric_limits<double>::quiet_NaN());
      },
      nullptr, Box::symmetric(1, 1), Box::symmetric(1, 1), Vec::Zero(1), Vec::Zero(1));
  const Toy t;
  const OcpProblem prob{poisoned, t.cost, t.terminal, 2, CoefficientVector::constant(2, 1.0),
                        vec({0.5})};
  EXPECT_THROW(solve(prob), NumericalError);
}

TEST(Solve, RejectsMalformedProblems) {
  const Msd m;
  EXPECT_THROW(solve({m.model, m.cost, m.terminal, 3, CoefficientVector::constant(2, 1.0),
                      Vec::Zero(2)}),
               InvalidArgument);
  EXPECT_THROW(solve({m.model, m.cost, m.terminal, 2, CoefficientVector::constant(2, 1.0),
                      vec({11, 0})}),
               InvalidArgument);
  CoefficientVector bad = CoefficientVector::constant(2, 1.0);
  bad.values[1] = 0.0;
  EXPECT_THROW(solve({m.model, m.cost, m.terminal, 2, bad, Vec::Zero(2)}), InvalidArgument);
  const std::vector<Vec> short_warm(1, Vec::Zero(1));
  EXPECT_THROW(solve({m.model, m.cost, m.terminal, 2, CoefficientVector::constant(2, 1.0),
                      Vec::Zero(2)},
                     short_warm),
               InvalidArgument);
}

TEST(WarmStartShift, Examples) {
  const Msd m;
  OcpSolution prev;
  prev.converged = true;
  prev.controls = {vec({1}), vec({2}), vec({3})};
  const Vec z = vec({0.05, -0.02});
  prev.states = {Vec::Zero(2), Vec::Zero(2), Vec::Zero(2), z};
  const std::vector<Vec> s = warm_start_shift(prev, m.terminal);
  ASSERT_EQ(s.size(), 3u);
  EXPECT_EQ(s[0], vec({2}));
  EXPECT_EQ(s[1], vec({3}));
  EXPECT_EQ(s[2], m.terminal.local_control(z));

  prev.controls = {vec({4})};
  prev.states = {Vec::Zero(2), z};
  const std::vector<Vec> one = warm_start_shift(prev, m.terminal);
  ASSERT_EQ(one.size(), 1u);
  EXPECT_EQ(one[0], m.terminal.local_control(z));

  prev.controls.assign(4, Vec::Zero(1));
  prev.states.assign(5, Vec::Zero(2));
  for (const Vec& u : warm_start_shift(prev, m.terminal)) EXPECT_EQ(u, Vec::Zero(1));

  prev.converged = false;
  EXPECT_THROW(warm_start_shift(prev, m.terminal), InvalidArgument);
}

TEST(EvaluateCandidate, Examples) {
  const Msd m;
  const OcpProblem eq{m.model, m.cost, m.terminal, 3, CoefficientVector::constant(3, 1.0),
                      Vec::Zero(2)};
  const OcpSolution zero = evaluate_candidate(eq, std::vector<Vec>(3, Vec::Zero(1)));
  EXPECT_EQ(zero.value, 0.0);
  EXPECT_TRUE(zero.feasible);
  EXPECT_FALSE(zero.converged);

  const Toy t;
  const OcpProblem toy{t.model, t.cost, t.terminal, 1, CoefficientVector::constant(1, 1.0), vec({1})};
  const OcpSolution v = evaluate_candidate(toy, {vec({-0.6180339887498948})});
  EXPECT_NEAR(v.value, 1.6180339887498948, 1e-12);

  const OcpSolution bad = evaluate_candidate(eq, {vec({12}), vec({0}), vec({0})});
  EXPECT_NEAR(bad.control_box_margin, -2.0, 1e-12);
  EXPECT_FALSE(bad.feasible);

  EXPECT_THROW(evaluate_candidate(eq, std::vector<Vec>(2, Vec::Zero(1))), InvalidArgument);
  EXPECT_THROW(
      evaluate_candidate(eq, {vec({std::numeric_limits<double>::quiet_NaN()}), vec({0}), vec({0})}),
      NumericalError);
}
