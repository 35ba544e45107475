#include <qsmpc/closed_loop.hpp>

#include <gtest/gtest.h>

#include "ocp_instances.hpp"
#include "oracles.hpp"

#include <cstdlib>
#include <sstream>

using namespace qsmpc;
using instances::vec;

namespace {

struct Bench {
  SystemModel model;
  StageCost cost;
  TerminalIngredients terminal;
  int horizon;
  double c0;
  std::optional<double> lower_bound;
};

const Bench& msd() {
  static const Bench b = [] {
    SystemModel m = make_mass_spring_damper();
    StageCost l = make_quadratic_stage_cost(vec({1, 1}), vec({1}));
    TerminalIngredients t = lq_terminal_ingredients(m, l, 0.1);
    return Bench{std::move(m), std::move(l), std::move(t), 10, 5.0, std::nullopt};
  }();
  return b;
}

const Bench& primbs() {
  static const Bench b = [] {
    SystemModel m = make_primbs_system();
    StageCost l = make_quadratic_stage_cost(vec({0, 1}), vec({1}));
    TerminalIngredients t = lq_terminal_ingredients(m, l, 0.1);
    return Bench{std::move(m), std::move(l), std::move(t), 5, 20.0, 1.0};
  }();
  return b;
}

LoopConfig shaped_config(const Bench& b, UpdateRule rule) {
  LoopConfig c;
  c.controller = ControllerKind::shaped;
  c.horizon = b.horizon;
  c.initial_coefficients = CoefficientVector::constant(b.horizon, b.c0);
  c.update_rule = rule;
  c.lower_bound = b.lower_bound;
  return c;
}

LoopConfig baseline_config(const Bench& b) {
  LoopConfig c;
  c.controller = ControllerKind::baseline;
  c.horizon = b.horizon;
  return c;
}

ClosedLoopTrace run(const Bench& b, const LoopConfig& c, const Vec& x0) {
  return run_closed_loop(b.model, b.cost, b.terminal, c, x0);
}

void expect_bit_identical(const ClosedLoopTrace& a, const ClosedLoopTrace& b) {
  ASSERT_EQ(a.steps_taken(), b.steps_taken());
  EXPECT_EQ(a.accumulated_cost, b.accumulated_cost);
  EXPECT_EQ(a.final_state, b.final_state);
  for (int k = 0; k < a.steps_taken(); ++k) {
    const StepRecord& s = a.steps[k];
    const StepRecord& t = b.steps[k];
    EXPECT_EQ(s.state, t.state) << k;
    EXPECT_EQ(s.control, t.control) << k;
    EXPECT_EQ(s.value, t.value) << k;
    EXPECT_EQ(s.coefficients.values, t.coefficients.values) << k;
  }
}

}  // namespace

TEST(ClosedLoop, StartAtEquilibrium) {
  const ClosedLoopTrace tr = run(msd(), shaped_config(msd(), UpdateRule::td_constrained), Vec::Zero(2));
  EXPECT_TRUE(tr.converged);
  EXPECT_EQ(tr.steps_taken(), 0);
  EXPECT_EQ(tr.accumulated_cost, 0.0);
  EXPECT_TRUE(decay_check(tr).empty());
}

TEST(ClosedLoop, MsdBaselineFixture) {
  const Bench& b = msd();
  const Vec x0 = vec({1, 0});
  const ClosedLoopTrace tr = run(b, baseline_config(b), x0);
  ASSERT_TRUE(tr.converged);
  EXPECT_FALSE(tr.infeasible_at_start || tr.infeasible_mid_run);
  EXPECT_EQ(tr.steps_taken(), 30);
  EXPECT_NEAR(tr.accumulated_cost, 4.9380998169569619, 1e-8);
  EXPECT_NEAR(tr.initial_value(), 4.9380998169604471, 1e-8);
  EXPECT_NEAR(tr.steps[1].state[1], -0.53578791907342116, 1e-8);
  EXPECT_NEAR(tr.steps[10].state[0], 0.0091566882411767466, 1e-8);
  EXPECT_LT(tr.final_state.norm(), 1e-6);

  // First step against the condensed unconstrained LQ problem; the constraints
  // it drops are checked inactive at its optimum.
  Mat A(2, 2), B(2, 1);
  for (int j = 0; j < 2; ++j) A.col(j) = b.model.step(Vec::Unit(2, j), Vec::Zero(1));
  B.col(0) = b.model.step(Vec::Zero(2), vec({1}));
  const oracle::BatchLq ref =
      oracle::batch_lq(A, B, Mat::Identity(2, 2), Mat::Identity(1, 1),
                       *b.terminal.quadratic_matrix(), std::vector<double>(10, 1.0), x0);
  EXPECT_LT(ref.states.back().dot(*b.terminal.quadratic_matrix() * ref.states.back()),
            b.terminal.level());
  for (const Vec& u : ref.controls) EXPECT_TRUE(b.model.control_box().contains(u));
  for (const Vec& x : ref.states) EXPECT_TRUE(b.model.state_box().contains(x));
  EXPECT_NEAR(tr.steps[0].control[0], ref.controls[0][0], 1e-6);
  EXPECT_NEAR(tr.initial_value(), ref.value, 1e-6 * ref.value);
}

TEST(ClosedLoop, FrozenUnitCoefficientsReproduceBaseline) {
  for (const Bench* b : {&msd(), &primbs()}) {
    for (const Vec& x0 : {vec({1, 0}), vec({-0.7, 0.4}), vec({2, -1})}) {
      LoopConfig frozen = shaped_config(*b, UpdateRule::frozen);
      frozen.initial_coefficients = CoefficientVector::constant(b->horizon, 1.0);
      expect_bit_identical(run(*b, frozen, x0), run(*b, baseline_config(*b), x0));
    }
  }
}

TEST(ClosedLoop, DecayResidualsRespectTolerance) {
  for (const Bench* b : {&msd(), &primbs()}) {
    for (UpdateRule rule : {UpdateRule::allocation, UpdateRule::td_constrained}) {
      for (const Vec& x0 : {vec({1, 0}), vec({-1, 1}), vec({0.3, -0.8})}) {
        const ClosedLoopTrace tr = run(*b, shaped_config(*b, rule), x0);
        ASSERT_TRUE(tr.converged) << to_string(rule) << ' ' << to_string(x0);
        const std::vector<double> r = decay_check(tr);
        EXPECT_EQ(static_cast<int>(r.size()), tr.steps_taken() - 1);
        for (std::size_t k = 0; k < r.size(); ++k) {
          EXPECT_LE(r[k], 1e-6) << to_string(rule) << ' ' << to_string(x0) << " k=" << k;
          EXPECT_EQ(r[k], tr.steps[k].decay_residual);
        }
      }
    }
  }
}

TEST(ClosedLoop, EquilibriumTraceHasZeroResiduals) {
  LoopConfig c = shaped_config(msd(), UpdateRule::td_constrained);
  c.stop_norm = 0.0;
  c.max_steps = 4;
  const ClosedLoopTrace tr = run(msd(), c, Vec::Zero(2));
  ASSERT_EQ(tr.steps_taken(), 4);
  for (double r : decay_check(tr)) EXPECT_EQ(r, 0.0);
}

TEST(ClosedLoop, CorruptedCoefficientIsFlagged) {
  const Bench& b = msd();
  const Vec x0 = vec({1, 0});
  const CoefficientVector c0 = CoefficientVector::constant(b.horizon, 1.0);
  const OcpSolution s0 = solve({b.model, b.cost, b.terminal, b.horizon, c0, x0});
  ASSERT_TRUE(s0.converged);
  const StabilityConstraintData d = build_constraint_data(s0, c0, b.model, b.terminal, b.cost);
  const CoefficientVector bad = CoefficientVector::constant(b.horizon, 50.0);
  EXPECT_GT(w_membership(bad, d), 0.0);

  const Vec x1 = b.model.step(x0, s0.controls[0]);
  const OcpSolution s1 = solve({b.model, b.cost, b.terminal, b.horizon, bad, x1});
  ASSERT_TRUE(s1.converged);
  ClosedLoopTrace tr;
  for (int k = 0; k < 2; ++k) {
    StepRecord r;
    r.k = k;
    r.feasible = true;
    r.state = k == 0 ? x0 : x1;
    r.control = (k == 0 ? s0 : s1).controls[0];
    r.coefficients = k == 0 ? c0 : bad;
    r.value = (k == 0 ? s0 : s1).value;
    r.stage_cost = b.cost.evaluate(r.state, r.control);
    tr.steps.push_back(r);
  }
  const std::vector<double> res = decay_check(tr);
  ASSERT_EQ(res.size(), 1u);
  EXPECT_GT(res[0], 0.0);
}

TEST(ClosedLoop, TraceInvariants) {
  for (const Bench* b : {&msd(), &primbs()}) {
    const ClosedLoopTrace tr = run(*b, shaped_config(*b, UpdateRule::td_constrained), vec({-1, 1}));
    ASSERT_TRUE(tr.converged);
    double sum = 0.0;
    for (int k = 0; k < tr.steps_taken(); ++k) {
      const StepRecord& s = tr.steps[k];
      EXPECT_EQ(s.k, k);
      EXPECT_TRUE(s.feasible);
      EXPECT_TRUE(s.candidate_feasible) << k;
      EXPECT_TRUE(b->model.control_box().contains(s.control));
      EXPECT_TRUE(s.coefficients.valid());
      EXPECT_LE(s.w_slack, 1e-10);
      const Vec next = k + 1 < tr.steps_taken() ? tr.steps[k + 1].state : tr.final_state;
      EXPECT_LE((b->model.step(s.state, s.control) - next).lpNorm<Eigen::Infinity>(), 1e-12);
      sum += s.stage_cost;
    }
    EXPECT_EQ(tr.accumulated_cost, sum);
    EXPECT_EQ(tr.tail_estimate, b->terminal.cost(tr.final_state));
    EXPECT_LT(tr.final_state.norm(), 1e-2);
  }
}

TEST(ClosedLoop, BaselineCoefficientsStayAtOne) {
  LoopConfig c = baseline_config(msd());
  c.initial_coefficients = CoefficientVector::constant(10, 7.0);
  const ClosedLoopTrace tr = run(msd(), c, vec({0.5, 0.5}));
  for (const StepRecord& s : tr.steps) {
    for (double v : s.coefficients.values) EXPECT_EQ(v, 1.0);
  }
}

TEST(ClosedLoop, ShapedCoefficientsTakeEffectNextStep) {
  const ClosedLoopTrace tr = run(msd(), shaped_config(msd(), UpdateRule::allocation), vec({1, 0}));
  ASSERT_GE(tr.steps_taken(), 2);
  for (double v : tr.steps[0].coefficients.values) EXPECT_EQ(v, 5.0);
  // The allocation rule shifts the vector by one slot.
  for (int i = 0; i + 1 < 10; ++i) {
    EXPECT_EQ(tr.steps[1].coefficients[i], tr.steps[0].coefficients[i + 1]);
  }
}

TEST(ClosedLoop, InfeasibleStartIsReported) {
  PrimbsParams p;
  p.control_bound = 20.0;
  const SystemModel m = make_primbs_system(p);
  const Bench& b = primbs();
  const TerminalIngredients t = lq_terminal_ingredients(m, b.cost, 0.1);
  const ClosedLoopTrace tr = run_closed_loop(m, b.cost, t, baseline_config(b), vec({5, 5}));
  EXPECT_TRUE(tr.infeasible_at_start);
  EXPECT_FALSE(tr.infeasible_mid_run);
  EXPECT_FALSE(tr.converged);
  EXPECT_EQ(tr.infeasible_step, 0);
  ASSERT_EQ(tr.steps_taken(), 1);
  EXPECT_FALSE(tr.steps[0].feasible);
  EXPECT_EQ(tr.accumulated_cost, 0.0);
}

TEST(ClosedLoop, RejectsBadInput) {
  const Bench& b = msd();
  LoopConfig c = baseline_config(b);
  EXPECT_THROW(run(b, c, vec({11, 0})), InvalidArgument);
  EXPECT_THROW(run(b, c, vec({1, 0, 0})), InvalidArgument);
  c.max_steps = 0;
  EXPECT_THROW(run(b, c, vec({1, 0})), InvalidArgument);
  c = shaped_config(b, UpdateRule::allocation);
  c.stop_norm = -1.0;
  EXPECT_THROW(run(b, c, vec({1, 0})), InvalidArgument);
  c = shaped_config(b, UpdateRule::allocation);
  c.initial_coefficients = CoefficientVector::constant(3, 1.0);
  EXPECT_THROW(run(b, c, vec({1, 0})), InvalidArgument);
  EXPECT_THROW(parse_controller("mpc"), InvalidArgument);
  EXPECT_EQ(parse_controller(to_string(ControllerKind::shaped)), ControllerKind::shaped);
}

TEST(ClosedLoop, NumericalErrorCarriesStepIndex) {
  const SystemModel bad(
      "nan",
      [](const Vec& x, const Vec& u) -> Vec {
        return x[0] == 0.0 ? Vec(x + u) : Vec::Constant(1, std::nan(""));
      },
      nullptr, Box::symmetric(1, 10), Box::symmetric(1, 10), Vec::Zero(1), Vec::Zero(1));
  const StageCost l = make_quadratic_stage_cost(vec({1}), vec({1}));
  const TerminalIngredients t = lq_terminal_ingredients(instances::scalar_integrator(), l, 1.0);
  LoopConfig c;
  c.controller = ControllerKind::baseline;
  c.horizon = 2;
  try {
    run_closed_loop(bad, l, t, c, vec({1}));
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("step 0"), std::string::npos) << e.what();
  }
}

TEST(ClosedLoop, CsvRoundTrip) {
  const ClosedLoopTrace tr = run(msd(), shaped_config(msd(), UpdateRule::td_constrained), vec({1, 0}));
  std::ostringstream os;
  write_trace_csv(os, tr);
  std::istringstream is(os.str());
  std::string line;
  std::getline(is, line);
  EXPECT_EQ(line,
            "k,x0,x1,u0,c0,c1,c2,c3,c4,c5,c6,c7,c8,c9,stage_cost,value,decay_residual,w_slack,"
            "feasible");
  int rows = 0;
  while (std::getline(is, line)) {
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    ASSERT_EQ(f.size(), 19u);
    const StepRecord& s = tr.steps[rows];
    EXPECT_EQ(std::stoi(f[0]), s.k);
    EXPECT_EQ(std::strtod(f[1].c_str(), nullptr), s.state[0]);
    EXPECT_EQ(std::strtod(f[3].c_str(), nullptr), s.control[0]);
    EXPECT_EQ(std::strtod(f[13].c_str(), nullptr), s.coefficients[9]);
    EXPECT_EQ(std::strtod(f[15].c_str(), nullptr), s.value);
    EXPECT_EQ(f[18], "1");
    ++rows;
  }
  EXPECT_EQ(rows, tr.steps_taken());
}

TEST(ClosedLoop, Deterministic) {
  const LoopConfig c = shaped_config(primbs(), UpdateRule::td_constrained);
  expect_bit_identical(run(primbs(), c, vec({2, 1})), run(primbs(), c, vec({2, 1})));
}
