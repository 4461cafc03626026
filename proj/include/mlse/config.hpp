#pragma once

// JSON run configuration shared by the command-line subcommands.
//
//   {
//     "channel": "abs",                       // "abs" | "linear"
//     "layers": [ {"kind": "linear", "beta": 1.0},
//                 {"kind": "relu",   "beta": "auto"} ],  // only the last beta may be "auto"
//     "prior": {"kind": "gaussian"},          // or {"kind": "gauss-bernoulli", "sparsity": 0.3}
//     "rho": 2.0,                             // single-spec commands
//     "rho_grid": [0.25, 0.5, 1.0],           // phase-diagram
//     "alpha": 1.1, "alpha_grid": [...], "qx_grid": [...],
//     "init": "uninformative",                // se-solve: "uninformative" | "informed"
//     "resolution": 1e-3, "jobs": 0, "seed": 0, "quad_order": 100,
//     "d": 2000, "n_samples": 10,
//     "solver": {...}, "amp": {...}
//   }
//
// Grids may also be given as {"from": a, "to": b, "count": n} (inclusive).

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "mlse/amp.hpp"
#include "mlse/errors.hpp"
#include "mlse/network.hpp"
#include "mlse/state_evolution.hpp"

namespace mlse {

/// Invalid configuration; field() names the offending key path.
class ConfigError : public InvalidArgument {
 public:
  ConfigError(std::string field, const std::string& what)
      : InvalidArgument(field + ": " + what), field_(std::move(field)) {}
  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

struct LayerTemplate {
  LayerKind kind = LayerKind::LinearPass;
  std::optional<double> beta;  // empty: fixed by rho and the other betas
  bool operator==(const LayerTemplate&) const = default;
};

struct RunConfig {
  ChannelKind channel = ChannelKind::Abs;
  std::vector<LayerTemplate> layers;
  LatentPrior prior = LatentPrior::gaussian();
  std::optional<double> rho;
  std::vector<double> rho_grid;
  std::optional<double> alpha;
  std::vector<double> alpha_grid;
  std::vector<double> qx_grid;
  InitKind init = InitKind::Uninformative;
  double resolution = 1e-3;
  int jobs = 0;  // 0: all available cores
  std::uint64_t seed = 0;
  int quad_order = kDefaultQuadratureOrder;
  std::size_t d = 2000;
  int n_samples = 10;
  SolverOptions solver;
  AmpOptions amp;

  bool operator==(const RunConfig& o) const {
    const auto same_solver = [](const SolverOptions& a, const SolverOptions& b) {
      return a.damping == b.damping && a.max_damping == b.max_damping && a.tol == b.tol &&
             a.max_iter == b.max_iter && a.epsilon == b.epsilon && a.informed_gap == b.informed_gap &&
             a.early_exit == b.early_exit && a.extrapolate_recovery == b.extrapolate_recovery &&
             a.compute_free_energy == b.compute_free_energy;
    };
    const auto same_amp = [](const AmpOptions& a, const AmpOptions& b) {
      return a.damping == b.damping && a.max_damping == b.max_damping && a.tol == b.tol &&
             a.max_iter == b.max_iter && a.onsager == b.onsager && a.init_scale == b.init_scale;
    };
    return channel == o.channel && layers == o.layers && prior == o.prior && rho == o.rho &&
           rho_grid == o.rho_grid && alpha == o.alpha && alpha_grid == o.alpha_grid && qx_grid == o.qx_grid &&
           init == o.init && resolution == o.resolution && jobs == o.jobs && seed == o.seed &&
           quad_order == o.quad_order && d == o.d && n_samples == o.n_samples && same_solver(solver, o.solver) &&
           same_amp(amp, o.amp);
  }

  /// Concrete spec at compression rho (an "auto" last beta is solved for).
  NetworkSpec spec_at(double rho_value) const {
    std::vector<LayerKind> kinds;
    for (const auto& l : layers) kinds.push_back(l.kind);
    const bool auto_last = !layers.empty() && !layers.back().beta;
    if (auto_last) {
      std::vector<double> leading;
      for (std::size_t l = 0; l + 1 < layers.size(); ++l) leading.push_back(*layers[l].beta);
      return NetworkSpec::with_auto_last_beta(channel, kinds, leading, rho_value, prior);
    }
    NetworkSpec spec;
    spec.channel = channel;
    spec.prior = prior;
    spec.rho = rho_value;
    for (const auto& l : layers) spec.layers.push_back({l.kind, *l.beta});
    spec.validate();
    return spec;
  }

  /// The single spec of commands that take "rho".
  NetworkSpec spec() const {
    if (!rho) throw ConfigError("rho", "required by this command");
    try {
      return spec_at(*rho);
    } catch (const ConfigError&) {
      throw;
    } catch (const InvalidArgument& e) {
      throw ConfigError("layers", e.what());
    }
  }
};

namespace detail {

using nlohmann::json;

inline const json* find(const json& j, const char* key) {
  const auto it = j.find(key);
  return it == j.end() ? nullptr : &*it;
}

inline double get_real(const json& v, const std::string& field) {
  if (!v.is_number()) throw ConfigError(field, "expected a number");
  const double x = v.get<double>();
  if (!std::isfinite(x)) throw ConfigError(field, "must be finite");
  return x;
}

inline double get_positive(const json& v, const std::string& field) {
  const double x = get_real(v, field);
  if (!(x > 0.0)) throw ConfigError(field, "must be positive");
  return x;
}

inline long long get_int(const json& v, const std::string& field, long long lo) {
  if (!v.is_number_integer() && !v.is_number_unsigned()) throw ConfigError(field, "expected an integer");
  const long long x = v.get<long long>();
  if (x < lo) throw ConfigError(field, "must be >= " + std::to_string(lo));
  return x;
}

inline bool get_bool(const json& v, const std::string& field) {
  if (!v.is_boolean()) throw ConfigError(field, "expected true or false");
  return v.get<bool>();
}

inline std::vector<double> get_grid(const json& v, const std::string& field) {
  std::vector<double> out;
  if (v.is_array()) {
    for (std::size_t i = 0; i < v.size(); ++i) out.push_back(get_real(v[i], field + "[" + std::to_string(i) + "]"));
  } else if (v.is_object()) {
    const json* from = find(v, "from");
    const json* to = find(v, "to");
    const json* count = find(v, "count");
    if (!from || !to || !count) throw ConfigError(field, "range needs from, to and count");
    const double a = get_real(*from, field + ".from"), b = get_real(*to, field + ".to");
    const long long n = get_int(*count, field + ".count", 1);
    for (long long i = 0; i < n; ++i) {
      const double x = n == 1 ? a : a + (b - a) * double(i) / double(n - 1);
      // snap to 12 significant digits so 0.3 + 0.6 prints as 0.9
      char buf[32];
      std::snprintf(buf, sizeof buf, "%.12g", x);
      out.push_back(std::strtod(buf, nullptr));
    }
  } else {
    throw ConfigError(field, "expected a list of numbers or {from, to, count}");
  }
  if (out.empty()) throw ConfigError(field, "grid is empty");
  return out;
}

inline void check_keys(const json& j, const std::vector<std::string>& allowed, const std::string& where) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (std::find(allowed.begin(), allowed.end(), it.key()) == allowed.end()) {
      throw ConfigError(where + it.key(), "unknown key");
    }
  }
}

}  // namespace detail

inline RunConfig parse_config(const nlohmann::json& j) {
  using detail::find;
  if (!j.is_object()) throw ConfigError("<root>", "expected a JSON object");
  detail::check_keys(j,
                     {"channel", "layers", "prior", "rho", "rho_grid", "alpha", "alpha_grid", "qx_grid", "init",
                      "resolution", "jobs", "seed", "quad_order", "d", "n_samples", "solver", "amp"},
                     "");
  RunConfig c;
  if (const auto* v = find(j, "channel")) {
    const std::string s = v->is_string() ? v->get<std::string>() : "";
    if (s == "abs") {
      c.channel = ChannelKind::Abs;
    } else if (s == "linear") {
      c.channel = ChannelKind::Linear;
    } else {
      throw ConfigError("channel", "expected \"abs\" or \"linear\"");
    }
  } else {
    throw ConfigError("channel", "missing");
  }

  if (const auto* v = find(j, "layers")) {
    if (!v->is_array()) throw ConfigError("layers", "expected a list");
    for (std::size_t l = 0; l < v->size(); ++l) {
      const std::string where = "layers[" + std::to_string(l) + "]";
      const auto& e = (*v)[l];
      if (!e.is_object()) throw ConfigError(where, "expected {kind, beta}");
      detail::check_keys(e, {"kind", "beta"}, where + ".");
      LayerTemplate t;
      const auto* kind = find(e, "kind");
      const std::string ks = kind && kind->is_string() ? kind->get<std::string>() : "";
      if (ks == "linear") {
        t.kind = LayerKind::LinearPass;
      } else if (ks == "relu") {
        t.kind = LayerKind::Relu;
      } else {
        throw ConfigError(where + ".kind", "expected \"linear\" or \"relu\"");
      }
      const auto* beta = find(e, "beta");
      if (!beta) throw ConfigError(where + ".beta", "missing");
      if (beta->is_string()) {
        if (beta->get<std::string>() != "auto") throw ConfigError(where + ".beta", "expected a number or \"auto\"");
        if (l + 1 != v->size()) throw ConfigError(where + ".beta", "only the last layer may use \"auto\"");
      } else {
        t.beta = detail::get_positive(*beta, where + ".beta");
      }
      c.layers.push_back(t);
    }
  }

  if (const auto* v = find(j, "prior")) {
    if (!v->is_object()) throw ConfigError("prior", "expected {kind, sparsity}");
    detail::check_keys(*v, {"kind", "sparsity"}, "prior.");
    const auto* kind = find(*v, "kind");
    const std::string ks = kind && kind->is_string() ? kind->get<std::string>() : "";
    if (ks == "gaussian") {
      if (find(*v, "sparsity")) throw ConfigError("prior.sparsity", "not used by the Gaussian prior");
      c.prior = LatentPrior::gaussian();
    } else if (ks == "gauss-bernoulli") {
      const auto* sp = find(*v, "sparsity");
      if (!sp) throw ConfigError("prior.sparsity", "missing");
      const double r = detail::get_real(*sp, "prior.sparsity");
      if (!(r > 0.0 && r <= 1.0)) throw ConfigError("prior.sparsity", "must lie in (0, 1]");
      c.prior = LatentPrior::gauss_bernoulli(r);
    } else {
      throw ConfigError("prior.kind", "expected \"gaussian\" or \"gauss-bernoulli\"");
    }
  }

  if (const auto* v = find(j, "rho")) c.rho = detail::get_positive(*v, "rho");
  if (const auto* v = find(j, "rho_grid")) {
    c.rho_grid = detail::get_grid(*v, "rho_grid");
    for (std::size_t i = 0; i < c.rho_grid.size(); ++i) {
      if (!(c.rho_grid[i] > 0.0)) throw ConfigError("rho_grid[" + std::to_string(i) + "]", "must be positive");
    }
  }
  if (const auto* v = find(j, "alpha")) c.alpha = detail::get_positive(*v, "alpha");
  if (const auto* v = find(j, "alpha_grid")) {
    c.alpha_grid = detail::get_grid(*v, "alpha_grid");
    for (std::size_t i = 0; i < c.alpha_grid.size(); ++i) {
      if (!(c.alpha_grid[i] > 0.0)) throw ConfigError("alpha_grid[" + std::to_string(i) + "]", "must be positive");
    }
  }
  if (const auto* v = find(j, "qx_grid")) c.qx_grid = detail::get_grid(*v, "qx_grid");
  if (const auto* v = find(j, "init")) {
    const std::string s = v->is_string() ? v->get<std::string>() : "";
    if (s == "uninformative") {
      c.init = InitKind::Uninformative;
    } else if (s == "informed") {
      c.init = InitKind::Informed;
    } else {
      throw ConfigError("init", "expected \"uninformative\" or \"informed\"");
    }
  }
  if (const auto* v = find(j, "resolution")) c.resolution = detail::get_positive(*v, "resolution");
  if (const auto* v = find(j, "jobs")) c.jobs = int(detail::get_int(*v, "jobs", 0));
  if (const auto* v = find(j, "seed")) c.seed = std::uint64_t(detail::get_int(*v, "seed", 0));
  if (const auto* v = find(j, "quad_order")) c.quad_order = int(detail::get_int(*v, "quad_order", 2));
  if (const auto* v = find(j, "d")) c.d = std::size_t(detail::get_int(*v, "d", 1));
  if (const auto* v = find(j, "n_samples")) c.n_samples = int(detail::get_int(*v, "n_samples", 1));

  if (const auto* v = find(j, "solver")) {
    if (!v->is_object()) throw ConfigError("solver", "expected an object");
    detail::check_keys(*v,
                       {"damping", "max_damping", "tol", "max_iter", "epsilon", "informed_gap", "early_exit",
                        "extrapolate_recovery", "compute_free_energy"},
                       "solver.");
    auto& s = c.solver;
    if (const auto* x = find(*v, "damping")) s.damping = detail::get_real(*x, "solver.damping");
    if (const auto* x = find(*v, "max_damping")) s.max_damping = detail::get_real(*x, "solver.max_damping");
    if (const auto* x = find(*v, "tol")) s.tol = detail::get_positive(*x, "solver.tol");
    if (const auto* x = find(*v, "max_iter")) s.max_iter = int(detail::get_int(*x, "solver.max_iter", 1));
    if (const auto* x = find(*v, "epsilon")) s.epsilon = detail::get_positive(*x, "solver.epsilon");
    if (const auto* x = find(*v, "informed_gap")) s.informed_gap = detail::get_positive(*x, "solver.informed_gap");
    if (const auto* x = find(*v, "early_exit")) s.early_exit = detail::get_bool(*x, "solver.early_exit");
    if (const auto* x = find(*v, "extrapolate_recovery")) {
      s.extrapolate_recovery = detail::get_bool(*x, "solver.extrapolate_recovery");
    }
    if (const auto* x = find(*v, "compute_free_energy")) {
      s.compute_free_energy = detail::get_bool(*x, "solver.compute_free_energy");
    }
    if (!(s.damping >= 0.0 && s.damping < 1.0)) throw ConfigError("solver.damping", "must lie in [0, 1)");
    if (!(s.max_damping >= 0.0 && s.max_damping < 1.0)) throw ConfigError("solver.max_damping", "must lie in [0, 1)");
  }
  if (const auto* v = find(j, "amp")) {
    if (!v->is_object()) throw ConfigError("amp", "expected an object");
    detail::check_keys(*v, {"damping", "max_damping", "tol", "max_iter", "onsager", "init_scale"}, "amp.");
    auto& a = c.amp;
    if (const auto* x = find(*v, "damping")) a.damping = detail::get_real(*x, "amp.damping");
    if (const auto* x = find(*v, "max_damping")) a.max_damping = detail::get_real(*x, "amp.max_damping");
    if (const auto* x = find(*v, "tol")) a.tol = detail::get_positive(*x, "amp.tol");
    if (const auto* x = find(*v, "max_iter")) a.max_iter = int(detail::get_int(*x, "amp.max_iter", 1));
    if (const auto* x = find(*v, "onsager")) a.onsager = detail::get_bool(*x, "amp.onsager");
    if (const auto* x = find(*v, "init_scale")) a.init_scale = detail::get_positive(*x, "amp.init_scale");
    if (!(a.damping >= 0.0 && a.damping < 1.0)) throw ConfigError("amp.damping", "must lie in [0, 1)");
    if (!(a.max_damping >= 0.0 && a.max_damping < 1.0)) throw ConfigError("amp.max_damping", "must lie in [0, 1)");
  }

  // Fixed betas must be consistent with every rho the config will be used at.
  const auto check_rho = [&](double r, const std::string& field) {
    try {
      (void)c.spec_at(r);
    } catch (const InvalidArgument& e) {
      const std::string key = c.layers.empty() ? field : "layers";
      std::string msg = e.what();
      if (msg.rfind(key + ": ", 0) == 0) msg.erase(0, key.size() + 2);
      throw ConfigError(key, msg + " (at " + field + ")");
    }
  };
  if (c.rho) check_rho(*c.rho, "rho");
  for (std::size_t i = 0; i < c.rho_grid.size(); ++i) check_rho(c.rho_grid[i], "rho_grid[" + std::to_string(i) + "]");
  return c;
}

inline RunConfig parse_config_text(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("<file>", std::string("malformed JSON: ") + e.what());
  }
  return parse_config(j);
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("<file>", "cannot open " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_config_text(buf.str());
}

/// Full configuration with every default made explicit.
inline nlohmann::json to_json(const RunConfig& c) {
  using nlohmann::json;
  json j;
  j["channel"] = to_string(c.channel);
  j["layers"] = json::array();
  for (const auto& l : c.layers) {
    json e;
    e["kind"] = to_string(l.kind);
    if (l.beta) {
      e["beta"] = *l.beta;
    } else {
      e["beta"] = "auto";
    }
    j["layers"].push_back(e);
  }
  if (c.prior.kind == PriorKind::Gaussian) {
    j["prior"] = {{"kind", "gaussian"}};
  } else {
    j["prior"] = {{"kind", "gauss-bernoulli"}, {"sparsity", c.prior.sparsity}};
  }
  if (c.rho) j["rho"] = *c.rho;
  if (!c.rho_grid.empty()) j["rho_grid"] = c.rho_grid;
  if (c.alpha) j["alpha"] = *c.alpha;
  if (!c.alpha_grid.empty()) j["alpha_grid"] = c.alpha_grid;
  if (!c.qx_grid.empty()) j["qx_grid"] = c.qx_grid;
  j["init"] = c.init == InitKind::Informed ? "informed" : "uninformative";
  j["resolution"] = c.resolution;
  j["jobs"] = c.jobs;
  j["seed"] = c.seed;
  j["quad_order"] = c.quad_order;
  j["d"] = c.d;
  j["n_samples"] = c.n_samples;
  j["solver"] = {{"damping", c.solver.damping},
                 {"max_damping", c.solver.max_damping},
                 {"tol", c.solver.tol},
                 {"max_iter", c.solver.max_iter},
                 {"epsilon", c.solver.epsilon},
                 {"informed_gap", c.solver.informed_gap},
                 {"early_exit", c.solver.early_exit},
                 {"extrapolate_recovery", c.solver.extrapolate_recovery},
                 {"compute_free_energy", c.solver.compute_free_energy}};
  j["amp"] = {{"damping", c.amp.damping},
              {"max_damping", c.amp.max_damping},
              {"tol", c.amp.tol},
              {"max_iter", c.amp.max_iter},
              {"onsager", c.amp.onsager},
              {"init_scale", c.amp.init_scale}};
  return j;
}

}  // namespace mlse
