// Command-line front end: thresholds, phase diagrams, AMP-vs-SE comparisons,
// free-energy landscapes and single SE solves, driven by a JSON config.

#include <CLI11.hpp>

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "mlse/amp.hpp"
#include "mlse/config.hpp"
#include "mlse/state_evolution.hpp"
#include "mlse/thresholds.hpp"

namespace {

using namespace mlse;

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitNumeric = 3;

std::string fmt(double v) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::string fmt(const std::optional<double>& v) { return v ? fmt(*v) : std::string(); }

std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

struct Output {
  std::ofstream file;
  std::ostream* out = &std::cout;
  std::string path;
  std::vector<std::string> errors;

  explicit Output(const std::string& p) : path(p) {
    if (!p.empty() && p != "-") {
      file.open(p);
      if (!file) throw ConfigError("--out", "cannot write " + p);
      out = &file;
    }
  }

  void line(const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) *out << (i ? "," : "") << csv_escape(cells[i]);
    *out << '\n';
  }

  // Failed rows go to a sidecar log next to the CSV (stderr without --out).
  void flush_errors() {
    if (errors.empty()) return;
    if (path.empty() || path == "-") {
      for (const auto& e : errors) std::cerr << "error: " << e << '\n';
      return;
    }
    std::ofstream log(path + ".errors.log");
    for (const auto& e : errors) log << e << '\n';
    std::cerr << errors.size() << " row(s) failed; see " << path << ".errors.log\n";
  }
};

/// Runs task(i) for i < n on `jobs` threads; results are placed by index, so
/// output order never depends on completion order.
void parallel_for(std::size_t n, int jobs, const std::function<void(std::size_t)>& task) {
  const unsigned hw = std::max(1u, std::thread::hardware_concurrency());
  const std::size_t workers = std::min<std::size_t>(n, jobs > 0 ? std::size_t(jobs) : hw);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) task(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) task(i);
    });
  }
  for (auto& t : pool) t.join();
}

struct Overrides {
  std::string config_path;
  std::string out;
  std::optional<double> resolution;
  std::optional<int> jobs;
  std::optional<std::uint64_t> seed;
  std::optional<int> quad_order;
};

RunConfig load(const Overrides& o) {
  if (o.config_path.empty()) throw ConfigError("--config", "required");
  RunConfig c = load_config(o.config_path);
  if (o.resolution) {
    if (!(*o.resolution > 0.0)) throw ConfigError("--resolution", "must be positive");
    c.resolution = *o.resolution;
  }
  if (o.jobs) {
    if (*o.jobs < 0) throw ConfigError("--jobs", "must be >= 0");
    c.jobs = *o.jobs;
  }
  if (o.seed) c.seed = *o.seed;
  if (o.quad_order) {
    if (*o.quad_order < 2) throw ConfigError("--quad-order", "must be >= 2");
    c.quad_order = *o.quad_order;
  }
  return c;
}

ThresholdOptions threshold_options(const RunConfig& c) {
  ThresholdOptions t = default_threshold_options(c.resolution);
  t.solver.damping = c.solver.damping;
  t.solver.max_damping = c.solver.max_damping;
  t.solver.tol = c.solver.tol;
  t.solver.max_iter = c.solver.max_iter;
  t.solver.epsilon = c.solver.epsilon;
  t.solver.informed_gap = c.solver.informed_gap;
  return t;
}

std::vector<double> rhos_of(const RunConfig& c) {
  if (!c.rho_grid.empty()) return c.rho_grid;
  if (c.rho) return {*c.rho};
  throw ConfigError("rho", "need rho or rho_grid");
}

int cmd_threshold(const RunConfig& c, Output& out) {
  const auto rhos = rhos_of(c);
  const Quadrature& quad = default_quadrature(c.quad_order);
  const auto opt = threshold_options(c);
  std::vector<std::optional<ThresholdReport>> reports(rhos.size());
  std::vector<std::string> errors(rhos.size());
  parallel_for(rhos.size(), c.jobs, [&](std::size_t i) {
    try {
      reports[i] = compute_thresholds(c.spec_at(rhos[i]), opt, quad);
    } catch (const std::exception& e) {
      errors[i] = e.what();
    }
  });
  out.line({"rho", "alpha_c", "alpha_c_method", "alpha_c_analytic", "alpha_it", "alpha_it_method",
            "alpha_it_counting", "alpha_alg", "alpha_alg_method", "delta_alg", "resolution", "predicates_monotone",
            "status"});
  for (std::size_t i = 0; i < rhos.size(); ++i) {
    if (!reports[i]) {
      out.line({fmt(rhos[i]), "", "", "", "", "", "", "", "", "", fmt(c.resolution), "", "failed"});
      out.errors.push_back("rho=" + fmt(rhos[i]) + ": " + errors[i]);
      continue;
    }
    const auto& r = *reports[i];
    out.line({fmt(rhos[i]), fmt(r.alpha_c), r.alpha_c ? to_string(r.alpha_c_method) : "", fmt(r.alpha_c_analytic),
              fmt(r.alpha_it), to_string(r.alpha_it_method), fmt(r.alpha_it_counting), fmt(r.alpha_alg),
              to_string(r.alpha_alg_method), fmt(r.delta_alg), fmt(r.resolution),
              r.predicates_monotone ? "true" : "false", "ok"});
  }
  return errors.size() == 1 && !reports[0] ? kExitNumeric : kExitOk;
}

int cmd_phase_diagram(const RunConfig& c, Output& out) {
  if (c.rho_grid.empty()) throw ConfigError("rho_grid", "required by phase-diagram");
  const Quadrature& quad = default_quadrature(c.quad_order);
  const auto opt = threshold_options(c);
  std::vector<std::optional<ThresholdReport>> reports(c.rho_grid.size());
  std::vector<std::string> errors(c.rho_grid.size());
  parallel_for(c.rho_grid.size(), c.jobs, [&](std::size_t i) {
    try {
      reports[i] = compute_thresholds(c.spec_at(c.rho_grid[i]), opt, quad);
    } catch (const std::exception& e) {
      errors[i] = e.what();
    }
  });
  out.line({"rho", "alpha_c", "alpha_it", "alpha_alg", "delta_alg", "status"});
  for (std::size_t i = 0; i < c.rho_grid.size(); ++i) {
    const double rho = c.rho_grid[i];
    if (!reports[i]) {
      out.line({fmt(rho), "", "", "", "", "failed"});
      out.errors.push_back("rho=" + fmt(rho) + ": " + errors[i]);
      continue;
    }
    const auto& r = *reports[i];
    out.line({fmt(rho), fmt(r.alpha_c), fmt(r.alpha_it), fmt(r.alpha_alg), fmt(r.delta_alg), "ok"});
  }
  return kExitOk;
}

int cmd_amp_compare(const RunConfig& c, Output& out) {
  if (c.alpha_grid.empty()) throw ConfigError("alpha_grid", "required by amp-compare");
  const NetworkSpec spec = c.spec();
  const Quadrature& quad = default_quadrature(c.quad_order);
  CompareOptions opt;
  opt.amp = c.amp;
  opt.se = c.solver;
  opt.se.compute_free_energy = false;
  opt.seed_base = c.seed;
  std::vector<AmpSeRow> rows(c.alpha_grid.size());
  std::vector<std::string> errors(c.alpha_grid.size());
  parallel_for(c.alpha_grid.size(), c.jobs, [&](std::size_t i) {
    try {
      rows[i] = compare_amp_se(spec, c.d, c.n_samples, {c.alpha_grid[i]}, opt, quad).front();
    } catch (const std::exception& e) {
      rows[i].alpha = c.alpha_grid[i];
      errors[i] = e.what();
    }
  });
  out.line({"alpha", "mse_amp_mean", "mse_amp_stderr", "mse_se", "samples_ok", "samples_failed", "status"});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& r = rows[i];
    for (const auto& f : r.failures) out.errors.push_back("alpha=" + fmt(r.alpha) + " " + f);
    if (!errors[i].empty()) out.errors.push_back("alpha=" + fmt(r.alpha) + ": " + errors[i]);
    const bool ok = errors[i].empty() && r.samples_ok > 0;
    out.line({fmt(r.alpha), fmt(r.mse_amp_mean), fmt(r.mse_amp_stderr), fmt(r.mse_se), std::to_string(r.samples_ok),
              std::to_string(r.samples_failed), ok ? (r.samples_failed ? "partial" : "ok") : "failed"});
  }
  return kExitOk;
}

int cmd_landscape(const RunConfig& c, Output& out) {
  if (!c.alpha) throw ConfigError("alpha", "required by landscape");
  const NetworkSpec spec = c.spec();
  std::vector<double> grid = c.qx_grid;
  if (grid.empty()) {
    // Uniform in q_x / rho_x, plus points approaching exact recovery.
    const double rx = spec.rho_x();
    for (int i = 1; i < 100; ++i) grid.push_back(rx * i / 100.0);
    for (int k = 3; k <= 8; ++k) grid.push_back(rx * (1.0 - std::pow(10.0, -k)));
  }
  const auto pts = landscape_profile(spec, *c.alpha, grid, default_quadrature(c.quad_order));
  out.line({"q_x", "phi", "qhat_x", "status", "note"});
  for (const auto& p : pts) {
    if (!p.ok) out.errors.push_back("q_x=" + fmt(p.q_x) + ": " + p.note);
    out.line({fmt(p.q_x), p.ok ? fmt(p.phi) : "", p.ok ? fmt(p.qhat_x) : "", p.ok ? "ok" : "failed", p.note});
  }
  return kExitOk;
}

int cmd_se_solve(const RunConfig& c, Output& out) {
  if (!c.alpha) throw ConfigError("alpha", "required by se-solve");
  const NetworkSpec spec = c.spec();
  const auto r = se_solve(spec, *c.alpha, c.init, c.solver, default_quadrature(c.quad_order));
  out.line({"alpha", "init", "mmse", "q_x", "qhat_x", "free_energy", "iterations", "converged", "recovered"});
  out.line({fmt(*c.alpha), c.init == InitKind::Informed ? "informed" : "uninformative", fmt(r.mmse),
            fmt(r.state.q_x), fmt(r.state.qhat_x), fmt(r.free_energy), std::to_string(r.iterations),
            r.converged ? "true" : "false", r.recovered(spec.rho_x()) ? "true" : "false"});
  return kExitOk;
}

int cmd_echo_config(const RunConfig& c, Output& out) {
  *out.out << to_json(c).dump(2) << '\n';
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"State evolution, thresholds and AMP for multi-layer generative priors"};
  app.require_subcommand(1);
  Overrides ov;
  const auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", ov.config_path, "JSON configuration file")->required();
    sub->add_option("--out", ov.out, "output file (default: stdout)");
    sub->add_option("--resolution", ov.resolution, "alpha resolution of threshold bisections");
    sub->add_option("--jobs", ov.jobs, "worker threads (0: all cores)");
    sub->add_option("--seed", ov.seed, "base seed of random instances");
    sub->add_option("--quad-order", ov.quad_order, "Gauss-Hermite order");
  };
  using Handler = int (*)(const RunConfig&, Output&);
  const std::vector<std::tuple<std::string, std::string, Handler>> commands = {
      {"threshold", "alpha_c, alpha_IT, alpha_alg and the gap for each rho", cmd_threshold},
      {"phase-diagram", "threshold table over rho_grid", cmd_phase_diagram},
      {"amp-compare", "AMP final MSE vs state evolution over alpha_grid", cmd_amp_compare},
      {"landscape", "constrained free energy along q_x", cmd_landscape},
      {"se-solve", "single state-evolution fixed point", cmd_se_solve},
      {"echo-config", "print the configuration with all defaults filled in", cmd_echo_config},
  };
  std::vector<CLI::App*> subs;
  for (const auto& [name, help, fn] : commands) {
    subs.push_back(app.add_subcommand(name, help));
    add_common(subs.back());
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  for (std::size_t i = 0; i < subs.size(); ++i) {
    if (!subs[i]->parsed()) continue;
    try {
      const RunConfig cfg = load(ov);
      Output out(ov.out);
      const int code = std::get<2>(commands[i])(cfg, out);
      out.flush_errors();
      return code;
    } catch (const InvalidArgument& e) {
      std::cerr << "config error: " << e.what() << '\n';
      return kExitConfig;
    } catch (const std::exception& e) {
      std::cerr << "numeric failure: " << e.what() << '\n';
      return kExitNumeric;
    }
  }
  return kExitConfig;
}
