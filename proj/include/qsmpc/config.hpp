#pragma once

#include <qsmpc/analysis.hpp>
#include <qsmpc/benchmarks.hpp>
#include <qsmpc/sweep.hpp>

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <fstream>
#include <istream>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace qsmpc {

struct ConfigKey {
  const char* name;
  const char* help;
};

/// Every accepted key; anything else is rejected.
inline const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = {
      {"benchmark", "msd or primbs (default msd); selects the defaults of every other key"},
      {"controller", "run: shaped or baseline (default shaped)"},
      {"x0", "run: initial state, comma separated"},
      {"horizon", "prediction horizon N (msd 10, primbs 5)"},
      {"c0", "initial coefficients, one value or N values (msd 5, primbs 20)"},
      {"update_rule", "td_constrained, allocation or frozen (default td_constrained)"},
      {"coeff_lower_bound", "lower bound on coefficients or none (msd none, primbs 1)"},
      {"terminal_level", "terminal set level (default 0.1)"},
      {"state_weights", "diagonal state weights (msd 1,1; primbs 0,1)"},
      {"control_weights", "diagonal control weights (default 1)"},
      {"state_bound", "symmetric state box half width (msd 10, primbs 20)"},
      {"control_bound", "symmetric control box half width (msd 10, primbs 100)"},
      {"grid", "sweep region min0,max0,min1,max1 (msd -1,1,-1,1; primbs -5,5,-5,5)"},
      {"points", "grid points per dimension, n or n0,n1 (default 41)"},
      {"workers", "sweep worker threads (default 1)"},
      {"ocp_tol", "solver stationarity tolerance (default 1e-8)"},
      {"ocp_max_iter", "solver iteration cap per subproblem (default 5000)"},
      {"multistart", "solver starts per problem, 1 to 3 (default 3)"},
      {"max_steps", "closed-loop step cap (default 400)"},
      {"stop_norm", "closed loop stops once |x| falls below this (default 1e-6)"},
      {"tail_tol", "closed loop also stops once V falls below this (default 1e-10)"},
      {"with_report", "sweep: per-cell suboptimality report, true or false (default false)"},
      {"surrogate_horizon", "first horizon of the long-horizon value surrogate (default 60)"},
      {"samples", "calibrate: sample count (default 500); check: states per benchmark (default 10)"},
      {"seed", "random seed for sampling (default 1)"},
      {"out", "sweep: output directory (default sweep_out)"},
      {"trace", "run: trace CSV path, - for stdout (default -)"},
  };
  return keys;
}

inline bool is_config_key(std::string_view k) {
  const auto& keys = config_keys();
  return std::any_of(keys.begin(), keys.end(), [&](const ConfigKey& c) { return k == c.name; });
}

using ConfigMap = std::map<std::string, std::string>;

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

}  // namespace detail

inline void set_config_value(ConfigMap& m, const std::string& key, const std::string& value) {
  if (!is_config_key(key)) throw ConfigError("unknown config key '" + key + "'");
  m[key] = detail::trim(value);
}

/// Lines of `key = value`; `#` starts a comment, blank lines are ignored.
inline ConfigMap parse_config(std::istream& is, const std::string& source = "config") {
  ConfigMap m;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const std::string t = detail::trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    const std::string where = source + ":" + std::to_string(lineno);
    if (eq == std::string::npos) throw ConfigError(where + ": expected key = value");
    const std::string key = detail::trim(std::string_view(t).substr(0, eq));
    if (m.count(key)) throw ConfigError(where + ": duplicate key '" + key + "'");
    if (!is_config_key(key)) throw ConfigError(where + ": unknown config key '" + key + "'");
    m[key] = detail::trim(std::string_view(t).substr(eq + 1));
  }
  return m;
}

inline ConfigMap load_config_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config file " + path);
  return parse_config(is, path);
}

/// Fully resolved settings for one CLI invocation.
struct Settings {
  BenchmarkSettings bench = benchmark_defaults(Benchmark::msd);
  ControllerKind controller = ControllerKind::shaped;
  UpdateRule update_rule = UpdateRule::td_constrained;
  std::vector<double> c0;  // one value or one per stage
  std::optional<Vec> x0;
  OcpOptions ocp;
  int max_steps = 400;
  double stop_norm = 1e-6;
  double tail_tol = 1e-10;
  int workers = 1;
  bool with_report = false;
  int surrogate_horizon = 60;
  std::optional<int> samples;
  std::uint64_t seed = 1;
  std::string out = "sweep_out";
  std::string trace = "-";

  CoefficientVector initial_coefficients() const {
    const int N = bench.horizon;
    if (c0.size() == 1) return CoefficientVector::constant(N, c0[0]);
    Vec v(N);
    for (int i = 0; i < N; ++i) v[i] = c0[static_cast<std::size_t>(i)];
    return CoefficientVector{v, CoefficientOrigin::initial};
  }

  LoopConfig loop(ControllerKind kind) const {
    LoopConfig c;
    c.controller = kind;
    c.horizon = bench.horizon;
    if (kind == ControllerKind::shaped) c.initial_coefficients = initial_coefficients();
    c.update_rule = update_rule;
    c.lower_bound = bench.lower_bound;
    c.max_steps = max_steps;
    c.stop_norm = stop_norm;
    c.tail_tol = tail_tol;
    c.ocp = ocp;
    return c;
  }

  VInfOptions vinf() const {
    VInfOptions v;
    v.horizon = surrogate_horizon;
    v.max_horizon = std::max(v.max_horizon, surrogate_horizon);
    v.max_steps = max_steps;
    v.stop_norm = stop_norm;
    v.tail_tol = tail_tol;
    v.ocp.tolerance = ocp.tolerance;
    v.ocp.max_iterations = ocp.max_iterations;
    return v;
  }

  SweepSpec sweep() const {
    SweepSpec s;
    s.grid_min = bench.grid_min;
    s.grid_max = bench.grid_max;
    s.grid_points = bench.grid_points;
    s.shaped = loop(ControllerKind::shaped);
    s.baseline = loop(ControllerKind::baseline);
    s.workers = workers;
    s.with_report = with_report;
    s.vinf = vinf();
    return s;
  }
};

namespace detail {

inline ConfigError bad_value(const std::string& key, const std::string& value, const char* expected) {
  return ConfigError("config key '" + key + "': expected " + expected + ", got '" + value + "'");
}

inline double parse_real(const std::string& key, const std::string& text) {
  const std::string s = trim(text);
  double v = 0.0;
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || ec != std::errc{} || p != s.data() + s.size() || !std::isfinite(v)) {
    throw bad_value(key, text, "a finite number");
  }
  return v;
}

inline long long parse_integer(const std::string& key, const std::string& text) {
  const std::string s = trim(text);
  long long v = 0;
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || ec != std::errc{} || p != s.data() + s.size()) {
    throw bad_value(key, text, "an integer");
  }
  return v;
}

inline int parse_count(const std::string& key, const std::string& text, int minimum) {
  const long long v = parse_integer(key, text);
  if (v < minimum || v > 1000000000) {
    throw ConfigError("config key '" + key + "': must be at least " + std::to_string(minimum) +
                      ", got " + text);
  }
  return static_cast<int>(v);
}

inline std::vector<double> parse_reals(const std::string& key, const std::string& text) {
  std::vector<double> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = text.find(',', start);
    out.push_back(parse_real(key, text.substr(start, comma - start)));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

inline Vec to_vec(const std::vector<double>& v) {
  return Eigen::Map<const Vec>(v.data(), static_cast<Eigen::Index>(v.size()));
}

inline bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1" || text == "yes" || text == "on") return true;
  if (text == "false" || text == "0" || text == "no" || text == "off") return false;
  throw bad_value(key, text, "true or false");
}

inline double parse_positive(const std::string& key, const std::string& text) {
  const double v = parse_real(key, text);
  if (!(v > 0.0)) throw bad_value(key, text, "a positive number");
  return v;
}

}  // namespace detail

/// Benchmark defaults overridden by the given keys; value errors name the key.
inline Settings resolve_settings(const ConfigMap& m) {
  using namespace detail;
  for (const auto& [k, v] : m) {
    if (!is_config_key(k)) throw ConfigError("unknown config key '" + k + "'");
  }
  auto get = [&](const char* k) -> const std::string* {
    const auto it = m.find(k);
    return it == m.end() ? nullptr : &it->second;
  };
  Settings s;
  if (auto v = get("benchmark")) {
    try {
      s.bench = benchmark_defaults(parse_benchmark(*v));
    } catch (const InvalidArgument&) {
      throw bad_value("benchmark", *v, "msd or primbs");
    }
  }
  const int dim = 2;
  auto vector_of = [&](const char* k, const std::string& v, std::size_t n) {
    const std::vector<double> r = parse_reals(k, v);
    if (r.size() != n) {
      throw ConfigError(std::string("config key '") + k + "': expected " + std::to_string(n) +
                        " values, got " + std::to_string(r.size()));
    }
    return r;
  };
  if (auto v = get("controller")) {
    try {
      s.controller = parse_controller(*v);
    } catch (const InvalidArgument&) {
      throw bad_value("controller", *v, "shaped or baseline");
    }
  }
  if (auto v = get("x0")) s.x0 = to_vec(vector_of("x0", *v, dim));
  if (auto v = get("horizon")) s.bench.horizon = parse_count("horizon", *v, 1);
  s.c0 = {s.bench.initial_coefficient};
  if (auto v = get("c0")) {
    s.c0 = parse_reals("c0", *v);
    if (s.c0.size() != 1 && static_cast<int>(s.c0.size()) != s.bench.horizon) {
      throw ConfigError("config key 'c0': expected 1 or " + std::to_string(s.bench.horizon) +
                        " values, got " + std::to_string(s.c0.size()));
    }
    for (double c : s.c0) {
      if (!(c > 0.0)) throw bad_value("c0", *v, "positive coefficients");
    }
  }
  if (auto v = get("update_rule")) {
    try {
      s.update_rule = parse_update_rule(*v);
    } catch (const InvalidArgument&) {
      throw bad_value("update_rule", *v, "td_constrained, allocation or frozen");
    }
  }
  if (auto v = get("coeff_lower_bound")) {
    if (*v == "none") s.bench.lower_bound.reset();
    else s.bench.lower_bound = parse_positive("coeff_lower_bound", *v);
  }
  if (auto v = get("terminal_level")) s.bench.terminal_level = parse_positive("terminal_level", *v);
  if (auto v = get("state_weights")) {
    s.bench.state_weights = to_vec(vector_of("state_weights", *v, dim));
    if ((s.bench.state_weights.array() < 0.0).any()) {
      throw bad_value("state_weights", *v, "nonnegative weights");
    }
  }
  if (auto v = get("control_weights")) {
    s.bench.control_weights = to_vec(vector_of("control_weights", *v, 1));
    if (!(s.bench.control_weights[0] > 0.0)) throw bad_value("control_weights", *v, "a positive weight");
  }
  if (auto v = get("state_bound")) s.bench.state_bound = parse_positive("state_bound", *v);
  if (auto v = get("control_bound")) s.bench.control_bound = parse_positive("control_bound", *v);
  if (auto v = get("grid")) {
    const std::vector<double> g = vector_of("grid", *v, 2 * dim);
    for (int j = 0; j < dim; ++j) {
      if (!(g[2 * j] < g[2 * j + 1])) throw bad_value("grid", *v, "min below max in every dimension");
      s.bench.grid_min[j] = g[2 * j];
      s.bench.grid_max[j] = g[2 * j + 1];
    }
  }
  if (auto v = get("points")) {
    const std::vector<double> p = parse_reals("points", *v);
    if (p.size() != 1 && p.size() != static_cast<std::size_t>(dim)) {
      throw bad_value("points", *v, "one count or one per dimension");
    }
    for (int j = 0; j < dim; ++j) {
      const double n = p.size() == 1 ? p[0] : p[j];
      if (n != std::floor(n) || n < 2 || n > 100000) throw bad_value("points", *v, "integers of at least 2");
      s.bench.grid_points[j] = static_cast<int>(n);
    }
  }
  if (auto v = get("workers")) s.workers = parse_count("workers", *v, 1);
  if (auto v = get("ocp_tol")) s.ocp.tolerance = parse_positive("ocp_tol", *v);
  if (auto v = get("ocp_max_iter")) s.ocp.max_iterations = parse_count("ocp_max_iter", *v, 1);
  if (auto v = get("multistart")) {
    s.ocp.multistart = parse_count("multistart", *v, 1);
    if (s.ocp.multistart > 3) throw bad_value("multistart", *v, "1, 2 or 3");
  }
  if (auto v = get("max_steps")) s.max_steps = parse_count("max_steps", *v, 1);
  if (auto v = get("stop_norm")) {
    s.stop_norm = parse_real("stop_norm", *v);
    if (s.stop_norm < 0.0) throw bad_value("stop_norm", *v, "a nonnegative number");
  }
  if (auto v = get("tail_tol")) {
    s.tail_tol = parse_real("tail_tol", *v);
    if (s.tail_tol < 0.0) throw bad_value("tail_tol", *v, "a nonnegative number");
  }
  if (auto v = get("with_report")) s.with_report = parse_bool("with_report", *v);
  if (auto v = get("surrogate_horizon")) s.surrogate_horizon = parse_count("surrogate_horizon", *v, 1);
  if (auto v = get("samples")) s.samples = parse_count("samples", *v, 1);
  if (auto v = get("seed")) {
    const long long seed = parse_integer("seed", *v);
    if (seed < 0) throw bad_value("seed", *v, "a nonnegative integer");
    s.seed = static_cast<std::uint64_t>(seed);
    s.bench.seed = s.seed;
  }
  if (auto v = get("out")) {
    if (v->empty()) throw bad_value("out", *v, "a directory path");
    s.out = *v;
  }
  if (auto v = get("trace")) {
    if (v->empty()) throw bad_value("trace", *v, "a file path or -");
    s.trace = *v;
  }
  return s;
}

}  // namespace qsmpc
