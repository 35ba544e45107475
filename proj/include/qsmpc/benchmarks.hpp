#pragma once

#include <qsmpc/core.hpp>
#include <qsmpc/dynamics.hpp>
#include <qsmpc/ingredients.hpp>

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace qsmpc {

enum class Benchmark { msd, primbs };

inline std::string_view to_string(Benchmark b) { return b == Benchmark::msd ? "msd" : "primbs"; }

inline Benchmark parse_benchmark(std::string_view s) {
  if (s == "msd") return Benchmark::msd;
  if (s == "primbs") return Benchmark::primbs;
  throw InvalidArgument("unknown benchmark '" + std::string(s) + "' (expected msd or primbs)");
}

// Everything that defines one case study: plant, cost, terminal ingredients,
// controller defaults and the sweep grid.
struct BenchmarkSettings {
  Benchmark benchmark = Benchmark::msd;
  Vec state_weights;
  Vec control_weights;
  double terminal_level = 0.1;
  double state_bound = 0.0;
  double control_bound = 0.0;
  int horizon = 10;
  double initial_coefficient = 1.0;
  std::optional<double> lower_bound;
  std::vector<double> grid_min, grid_max;
  std::vector<int> grid_points;
  std::uint64_t seed = LqTerminalOptions{}.seed;  // terminal-set validation samples
};

inline BenchmarkSettings benchmark_defaults(Benchmark b) {
  BenchmarkSettings s;
  s.benchmark = b;
  s.control_weights = Vec::Ones(1);
  s.state_weights = Vec::Ones(2);
  s.grid_points = {41, 41};
  if (b == Benchmark::msd) {
    s.state_bound = MassSpringDamperParams{}.state_bound;
    s.control_bound = MassSpringDamperParams{}.control_bound;
    s.horizon = 10;
    s.initial_coefficient = 5.0;
    s.grid_min = {-1.0, -1.0};
    s.grid_max = {1.0, 1.0};
  } else {
    s.state_weights[0] = 0.0;
    s.state_bound = PrimbsParams{}.state_bound;
    s.control_bound = PrimbsParams{}.control_bound;
    s.horizon = 5;
    s.initial_coefficient = 20.0;
    s.lower_bound = 1.0;
    s.grid_min = {-5.0, -5.0};
    s.grid_max = {5.0, 5.0};
  }
  return s;
}

struct Plant {
  SystemModel model;
  StageCost cost;
  TerminalIngredients terminal;
};

inline Plant build_plant(const BenchmarkSettings& s) {
  SystemModel model = [&] {
    if (s.benchmark == Benchmark::msd) {
      MassSpringDamperParams p;
      p.state_bound = s.state_bound;
      p.control_bound = s.control_bound;
      return make_mass_spring_damper(p);
    }
    PrimbsParams p;
    p.state_bound = s.state_bound;
    p.control_bound = s.control_bound;
    return make_primbs_system(p);
  }();
  StageCost cost = make_quadratic_stage_cost(s.state_weights, s.control_weights);
  LqTerminalOptions lq;
  lq.seed = s.seed;
  TerminalIngredients terminal = lq_terminal_ingredients(model, cost, s.terminal_level, lq);
  return Plant{std::move(model), std::move(cost), std::move(terminal)};
}

}  // namespace qsmpc
