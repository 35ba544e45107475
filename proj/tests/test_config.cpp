#include <qsmpc/config.hpp>

#include <gtest/gtest.h>

#include <sstream>

using namespace qsmpc;

namespace {

ConfigMap parse(const std::string& text) {
  std::istringstream is(text);
  return parse_config(is, "test.cfg");
}

std::string error_of(const ConfigMap& m) {
  try {
    resolve_settings(m);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return {};
}

}  // namespace

TEST(ConfigParse, KeyValueLinesWithComments) {
  const ConfigMap m = parse("# sweep setup\nbenchmark = primbs\n\n  points=21   # coarse\nworkers =4\n");
  ASSERT_EQ(m.size(), 3u);
  EXPECT_EQ(m.at("benchmark"), "primbs");
  EXPECT_EQ(m.at("points"), "21");
  EXPECT_EQ(m.at("workers"), "4");
}

TEST(ConfigParse, UnknownKeyIsNamed) {
  try {
    parse("horizon = 5\nhorizn = 6\n");
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("'horizn'"), std::string::npos) << msg;
    EXPECT_NE(msg.find("test.cfg:2"), std::string::npos) << msg;
  }
  ConfigMap m;
  EXPECT_THROW(set_config_value(m, "colour", "blue"), ConfigError);
  EXPECT_NE(error_of({{"colour", "blue"}}).find("'colour'"), std::string::npos);
}

TEST(ConfigParse, MalformedLinesAndDuplicates) {
  EXPECT_THROW(parse("horizon 5\n"), ConfigError);
  EXPECT_THROW(parse("horizon = 5\nhorizon = 6\n"), ConfigError);
}

TEST(ConfigParse, MissingFileIsAConfigError) {
  EXPECT_THROW(load_config_file("/nonexistent/qsmpc.cfg"), ConfigError);
}

TEST(ConfigResolve, BenchmarkDefaults) {
  const Settings msd = resolve_settings({});
  EXPECT_EQ(msd.bench.benchmark, Benchmark::msd);
  EXPECT_EQ(msd.bench.horizon, 10);
  EXPECT_EQ(msd.initial_coefficients().values, Vec::Constant(10, 5.0));
  EXPECT_FALSE(msd.bench.lower_bound.has_value());
  EXPECT_EQ(msd.bench.grid_points, (std::vector<int>{41, 41}));

  const Settings primbs = resolve_settings({{"benchmark", "primbs"}});
  EXPECT_EQ(primbs.bench.horizon, 5);
  EXPECT_EQ(primbs.initial_coefficients().values, Vec::Constant(5, 20.0));
  EXPECT_EQ(primbs.bench.lower_bound, 1.0);
  EXPECT_EQ(primbs.bench.grid_min, (std::vector<double>{-5, -5}));
  EXPECT_EQ(primbs.bench.state_weights, (Vec(2) << 0, 1).finished());
}

TEST(ConfigResolve, OverridesReachLoopAndSweep) {
  const Settings s = resolve_settings({{"benchmark", "primbs"},
                                       {"horizon", "3"},
                                       {"c0", "4,3,2"},
                                       {"update_rule", "allocation"},
                                       {"coeff_lower_bound", "none"},
                                       {"grid", "-2,2,-1,1"},
                                       {"points", "5,3"},
                                       {"workers", "8"},
                                       {"ocp_tol", "1e-7"},
                                       {"multistart", "2"},
                                       {"max_steps", "50"},
                                       {"with_report", "true"},
                                       {"x0", "0.5,-1"},
                                       {"controller", "baseline"},
                                       {"seed", "42"}});
  const LoopConfig shaped = s.loop(ControllerKind::shaped);
  EXPECT_EQ(shaped.horizon, 3);
  EXPECT_EQ(shaped.initial_coefficients.values, (Vec(3) << 4, 3, 2).finished());
  EXPECT_EQ(shaped.update_rule, UpdateRule::allocation);
  EXPECT_FALSE(shaped.lower_bound.has_value());
  EXPECT_EQ(shaped.max_steps, 50);
  EXPECT_EQ(shaped.ocp.tolerance, 1e-7);
  EXPECT_EQ(shaped.ocp.multistart, 2);
  const LoopConfig base = s.loop(ControllerKind::baseline);
  EXPECT_EQ(base.start_coefficients().values, Vec::Ones(3));

  const SweepSpec spec = s.sweep();
  EXPECT_EQ(spec.grid_min, (std::vector<double>{-2, -1}));
  EXPECT_EQ(spec.grid_max, (std::vector<double>{2, 1}));
  EXPECT_EQ(spec.grid_points, (std::vector<int>{5, 3}));
  EXPECT_EQ(spec.workers, 8);
  EXPECT_TRUE(spec.with_report);
  EXPECT_EQ(*s.x0, (Vec(2) << 0.5, -1).finished());
  EXPECT_EQ(s.controller, ControllerKind::baseline);
  EXPECT_EQ(s.seed, 42u);
  EXPECT_EQ(s.bench.seed, 42u);
}

TEST(ConfigResolve, ValueErrorsNameTheKey) {
  const std::vector<std::pair<std::string, std::string>> bad = {
      {"benchmark", "pendulum"}, {"horizon", "0"},        {"horizon", "ten"},
      {"c0", "1,2"},             {"c0", "-1"},            {"update_rule", "greedy"},
      {"terminal_level", "0"},   {"grid", "1,-1,-1,1"},   {"grid", "-1,1"},
      {"points", "1"},           {"points", "2.5"},       {"workers", "0"},
      {"multistart", "4"},       {"with_report", "maybe"}, {"x0", "1"},
      {"ocp_tol", "nan"},        {"seed", "-3"},          {"controller", "mpc"},
      {"state_weights", "1,-1"}, {"control_weights", "0"},
  };
  for (const auto& [k, v] : bad) {
    const std::string msg = error_of({{k, v}});
    EXPECT_NE(msg.find("'" + k + "'"), std::string::npos) << k << " = " << v << " gave: " << msg;
  }
}

TEST(ConfigResolve, EveryDocumentedKeyIsAccepted) {
  const std::map<std::string, std::string> samples = {
      {"benchmark", "msd"},       {"controller", "shaped"},   {"x0", "1,0"},
      {"horizon", "10"},          {"c0", "5"},                {"update_rule", "frozen"},
      {"coeff_lower_bound", "1"}, {"terminal_level", "0.1"},  {"state_weights", "1,1"},
      {"control_weights", "1"},   {"state_bound", "10"},      {"control_bound", "10"},
      {"grid", "-1,1,-1,1"},      {"points", "21"},           {"workers", "2"},
      {"ocp_tol", "1e-8"},        {"ocp_max_iter", "100"},    {"multistart", "3"},
      {"max_steps", "10"},        {"stop_norm", "1e-6"},      {"tail_tol", "0"},
      {"with_report", "false"},   {"surrogate_horizon", "30"}, {"samples", "100"},
      {"seed", "7"},              {"out", "dir"},             {"trace", "t.csv"},
  };
  ConfigMap m;
  for (const ConfigKey& k : config_keys()) {
    ASSERT_TRUE(samples.count(k.name)) << "no sample value for " << k.name;
    set_config_value(m, k.name, samples.at(k.name));
  }
  EXPECT_NO_THROW(resolve_settings(m));
}
