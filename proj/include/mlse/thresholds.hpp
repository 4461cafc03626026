#pragma once

// Phase transitions of the model: weak recovery (alpha_c), perfect recovery
// (alpha_IT), algorithmic recovery from an uninformative start (alpha_alg),
// and the resulting phase regions.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mlse/channels.hpp"
#include "mlse/errors.hpp"
#include "mlse/layers.hpp"
#include "mlse/network.hpp"
#include "mlse/state_evolution.hpp"

namespace mlse {

enum class Method { Analytic, Numeric };

inline const char* to_string(Method m) { return m == Method::Analytic ? "analytic" : "numeric"; }

enum class PhaseRegion { Undetectable, WeakRecovery, Hard, Easy };

inline const char* to_string(PhaseRegion r) {
  switch (r) {
    case PhaseRegion::Undetectable: return "undetectable";
    case PhaseRegion::WeakRecovery: return "weak-recovery";
    case PhaseRegion::Hard: return "hard";
    case PhaseRegion::Easy: return "easy";
  }
  return "?";
}

struct ThresholdReport {
  std::optional<double> alpha_c;
  double alpha_it = 0.0;
  double alpha_alg = 0.0;
  double delta_alg = 0.0;
  Method alpha_c_method = Method::Numeric;
  Method alpha_it_method = Method::Numeric;
  Method alpha_alg_method = Method::Numeric;
  std::optional<double> alpha_c_analytic;
  std::optional<double> alpha_it_counting;
  double resolution = 1e-3;
  bool predicates_monotone = true;
};

inline constexpr double kDefaultResolution = 1e-3;
inline constexpr double kDivergenceSlopeTolerance = 1e-9;

// ---------------------------------------------------------------------------
// Weak recovery
// ---------------------------------------------------------------------------

/// Jacobian of the update map at the all-zero fixed point. Variables are
/// ordered top-down: (q_x, qhat_x, q_L, qhat_L, ..., q_1, qhat_1), where q_1
/// is the latent overlap. Entries are the exact slopes of the update
/// functions at zero (they carry 1/rho^2 factors that vanish when all second
/// moments equal one).
inline Eigen::MatrixXd jacobian_at_zero(const NetworkSpec& spec, double alpha,
                                        const Quadrature& quad = default_quadrature()) {
  spec.validate();
  if (!uninformative_fixed_point_exists(spec)) {
    throw UnsupportedOperation("jacobian_at_zero: the zero-overlap fixed point does not exist for " + describe(spec));
  }
  const std::size_t depth = spec.depth();
  const auto moments = spec.second_moments();
  const Eigen::Index n = static_cast<Eigen::Index>(2 * (depth + 1));
  Eigen::MatrixXd jac = Eigen::MatrixXd::Zero(n, n);
  // Position of variable h_{var+1} (var = depth is x).
  const auto q_idx = [&](std::size_t var) { return static_cast<Eigen::Index>(2 * (depth - var)); };
  const auto h_idx = [&](std::size_t var) { return q_idx(var) + 1; };

  jac(h_idx(depth), q_idx(depth)) = alpha * channel_stability_slope(spec.channel, moments[depth], quad);
  for (std::size_t j = 0; j < depth; ++j) {
    // layer j maps variable j to j + 1
    const auto c = layer_stability_coeffs(spec.layers[j].kind, moments[j], quad);
    jac(q_idx(j + 1), h_idx(j + 1)) = c.cxx;
    jac(q_idx(j + 1), q_idx(j)) = c.cxz;
    jac(h_idx(j), h_idx(j + 1)) = spec.layers[j].beta * c.cxz;
    jac(h_idx(j), q_idx(j)) = spec.layers[j].beta * c.czz;
  }
  const double rz = spec.prior.second_moment();
  jac(q_idx(0), h_idx(0)) = rz * rz;  // slope of Lambda_z at 0
  return jac;
}

/// Perron root of a nonnegative matrix by power iteration on J + I (the shift
/// removes the +-lambda degeneracy of the bipartite q/qhat structure).
inline double spectral_radius(const Eigen::MatrixXd& jac, double tol = 1e-10, int max_iter = 100000) {
  if (jac.rows() != jac.cols() || jac.rows() == 0) throw InvalidArgument("spectral_radius: need a square matrix");
  if ((jac.array() < 0.0).any()) throw InvalidArgument("spectral_radius: matrix must be nonnegative");
  const Eigen::MatrixXd shifted = jac + Eigen::MatrixXd::Identity(jac.rows(), jac.cols());
  Eigen::VectorXd v = Eigen::VectorXd::Ones(jac.rows()).normalized();
  double lambda = 0.0;
  for (int it = 0; it < max_iter; ++it) {
    Eigen::VectorXd w = shifted * v;
    const double next = w.norm();
    if (next == 0.0) return 0.0;
    w /= next;
    const double residual = (shifted * w - next * w).norm();
    v = w;
    if (std::abs(next - lambda) < tol * std::max(1.0, next) && residual < std::sqrt(tol)) {
      lambda = next;
      break;
    }
    lambda = next;
  }
  // Rayleigh quotient of the converged vector
  lambda = v.dot(shifted * v) / v.squaredNorm();
  return lambda - 1.0;
}

/// Closed form of the weak-recovery threshold for all-linear stacks:
/// Abs: (1/2) (1 + sum_l prod_{k<l} beta_{L-k})^{-1}; Linear channel: without the 1/2.
inline double alpha_c_analytic(ChannelKind channel, const std::vector<double>& betas) {
  double sum = 1.0;
  double prod = 1.0;
  for (std::size_t l = betas.size(); l-- > 0;) {
    if (!(betas[l] > 0.0)) throw InvalidArgument("alpha_c_analytic: betas must be positive");
    prod *= betas[l];
    sum += prod;
  }
  return (channel == ChannelKind::Abs ? 0.5 : 1.0) / sum;
}

inline double alpha_c_analytic(const NetworkSpec& spec) {
  if (!spec.all_layers(LayerKind::LinearPass)) {
    throw UnsupportedOperation("alpha_c_analytic: only all-linear layer stacks have the closed form");
  }
  return alpha_c_analytic(spec.channel, spec.betas());
}

/// Smallest alpha at which the zero fixed point turns unstable, by bisection
/// of spectral_radius(J(alpha)) - 1.
inline double alpha_c_numeric(const NetworkSpec& spec, double resolution = kDefaultResolution,
                              const Quadrature& quad = default_quadrature()) {
  if (!(resolution > 0.0)) throw InvalidArgument("alpha_c_numeric: resolution must be positive");
  const auto radius = [&](double a) { return spectral_radius(jacobian_at_zero(spec, a, quad)); };
  double lo = 0.0, hi = 1.0;
  while (radius(hi) < 1.0) {
    lo = hi;
    hi *= 2.0;
    if (hi > 1e6) throw NumericDomainError("alpha_c_numeric: zero fixed point stable for all alpha");
  }
  while (hi - lo > resolution) {
    const double mid = 0.5 * (lo + hi);
    (radius(mid) < 1.0 ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

// ---------------------------------------------------------------------------
// Perfect recovery
// ---------------------------------------------------------------------------

/// Counting bound for all-linear or all-ReLU stacks: the tightest
/// over-determination constraint over the signal and every hidden layer.
inline double alpha_it_counting(const NetworkSpec& spec) {
  spec.validate();
  const bool linear = spec.all_layers(LayerKind::LinearPass);
  const bool relu = !spec.layers.empty() && spec.all_layers(LayerKind::Relu);
  if (!linear && !relu) throw UnsupportedOperation("alpha_it_counting: mixed layer stacks have no counting formula");
  if (spec.prior.kind != PriorKind::Gaussian) {
    throw UnsupportedOperation("alpha_it_counting: formula assumes a Gaussian latent prior");
  }
  const double scale = relu ? 0.5 : 1.0;
  const auto widths = spec.widths();  // k_l / d
  double best = scale;                // the signal itself
  for (std::size_t l = 1; l < spec.depth(); ++l) best = std::min(best, scale * widths[l]);  // hidden layers
  return std::min(best, spec.rho);                                                      // the latent
}

struct PredicateLog {
  std::vector<std::pair<double, bool>> calls;

  bool monotone() const {
    double max_false = -std::numeric_limits<double>::infinity();
    double min_true = std::numeric_limits<double>::infinity();
    for (const auto& [a, v] : calls) (v ? min_true : max_false) = v ? std::min(min_true, a) : std::max(max_false, a);
    return max_false < min_true;
  }
};

namespace detail {

inline double bracket_start(const NetworkSpec& spec) {
  try {
    return alpha_it_counting(spec);
  } catch (const UnsupportedOperation&) {
    return std::min(1.0, spec.rho);
  }
}

// Smallest alpha with predicate true, assuming false-then-true ordering.
inline double bisect_threshold(const std::function<bool(double)>& pred, double lo, double hi, double resolution,
                               PredicateLog& log) {
  const auto eval = [&](double a) {
    const bool v = pred(a);
    log.calls.emplace_back(a, v);
    return v;
  };
  while (eval(lo)) {
    hi = lo;
    lo *= 0.5;
    if (lo < 1e-8) return 0.0;
  }
  while (!eval(hi)) {
    lo = hi;
    hi *= 2.0;
    if (hi > 1e4) throw NumericDomainError("threshold bracket expansion failed: predicate false up to alpha=1e4");
  }
  while (hi - lo > resolution) {
    const double mid = 0.5 * (lo + hi);
    (eval(mid) ? hi : lo) = mid;
  }
  return 0.5 * (lo + hi);
}

}  // namespace detail

struct ThresholdOptions {
  double resolution = kDefaultResolution;
  SolverOptions solver;
  // Compare the informed branch's limiting free energy explicitly (clamped
  // landscape near exact recovery). Costly for ReLU stacks.
  bool free_energy_limit_check = false;
};

inline ThresholdOptions default_threshold_options(double resolution = kDefaultResolution) {
  ThresholdOptions o;
  o.resolution = resolution;
  o.solver.early_exit = true;
  o.solver.extrapolate_recovery = true;
  o.solver.compute_free_energy = false;
  return o;
}

/// Free energy along the informed branch as it approaches exact recovery,
/// fitted as Phi = slope * log(mmse) + offset. Without noise the branch has
/// no finite-mmse fixed point and Phi diverges logarithmically.
struct InformedBranchLimit {
  double slope = 0.0;
  double offset = 0.0;
};

inline InformedBranchLimit informed_branch_limit(const NetworkSpec& spec, double alpha, const Quadrature& quad,
                                                 double gap_far = 1e-8, double gap_near = 1e-11) {
  const double rho_x = spec.rho_x();
  // every other overlap relaxed at clamped q_x
  const auto pts = landscape_profile(spec, alpha, {rho_x * (1.0 - gap_far), rho_x * (1.0 - gap_near)}, quad);
  for (const auto& p : pts) {
    if (!p.ok) throw NumericDomainError("informed_branch_limit: " + p.note);
  }
  const double l1 = std::log(rho_x * gap_far), l2 = std::log(rho_x * gap_near);
  InformedBranchLimit out;
  out.slope = (pts[0].phi - pts[1].phi) / (l1 - l2);
  out.offset = pts[1].phi - out.slope * l2;
  return out;
}

/// Contraction factor of the mmse per SE iteration close to exact recovery.
struct RecoveryGrowth {
  double rate = 0.0;  // < 1: exact recovery is locally stable
  int iterations = 0;
  bool settled = false;
};

/// Power iteration of the SE map near exact recovery: one step from overlaps
/// a distance `gap` (relative) below their maxima, record mmse_new / mmse_old,
/// then rescale every near-recovered overlap back to that distance. Overlaps
/// that drift away (unrecoverable hidden layers) are left to relax.
inline RecoveryGrowth exact_recovery_growth(const NetworkSpec& spec, double alpha,
                                            const Quadrature& quad = default_quadrature(), double gap = 1e-10,
                                            int max_iter = 5000) {
  spec.validate();
  if (!(gap > 0.0 && gap < 1e-6)) throw InvalidArgument("exact_recovery_growth: gap must lie in (0, 1e-6)");
  const auto moments = spec.second_moments();
  const double rho_x = moments.back();
  constexpr double kNear = 1e-3;  // relative gap below which an overlap counts as recovered
  constexpr std::size_t kLag = 10;
  SolverOptions init;
  init.informed_gap = gap;
  OverlapState st = initial_state(spec, InitKind::Informed, init);
  RecoveryGrowth out;
  std::vector<double> rates;
  for (int it = 1; it <= max_iter; ++it) {
    const double before = rho_x - st.q_x;
    st = se_step(spec, alpha, st, quad);
    const double after = rho_x - st.q_x;
    if (!(after > 0.0) || !std::isfinite(after)) throw NumericDomainError("exact_recovery_growth: mmse left (0, inf)");
    out.rate = after / before;
    out.iterations = it;
    rates.push_back(out.rate);
    const double scale = gap * rho_x / after;
    st.q_x = rho_x * (1.0 - gap);
    for (std::size_t i = 0; i < st.q.size(); ++i) {
      const double v = moments[i] - st.q[i];
      if (v < kNear * moments[i]) st.q[i] = moments[i] - std::min(v * scale, kNear * moments[i]);
    }
    // The rate converges geometrically to the dominant eigenvalue; settle
    // once the extrapolated remaining drift cannot carry it across 1.
    const std::size_t n = rates.size();
    if (n > 2 * kLag + 20) {
      const double d1 = rates[n - 1] - rates[n - 1 - kLag];
      const double d0 = rates[n - 1 - kLag] - rates[n - 1 - 2 * kLag];
      double limit = out.rate;
      bool geometric = std::abs(d1) < 1e-14;
      if (!geometric && d0 != 0.0) {
        const double ratio = d1 / d0;
        if (ratio > 0.0 && ratio < 0.99) {
          limit = out.rate + d1 * ratio / (1.0 - ratio);
          geometric = true;
        }
      }
      // slow non-geometric drift (hidden overlaps relaxing): settle when even
      // 50 more lags of it would stay well clear of 1
      const bool creeping = !geometric && 50.0 * std::abs(d1) < 0.5 * std::abs(1.0 - out.rate);
      if (creeping) {
        out.settled = true;
        break;
      }
      if (geometric && std::abs(limit - out.rate) < 0.5 * std::abs(1.0 - limit)) {
        out.rate = limit;
        out.settled = true;
        break;
      }
    }
  }
  return out;
}

/// Predicate for alpha >= alpha_IT: exact recovery is a stable fixed point
/// of the informed branch and the global minimum of Phi. Without noise a
/// stable exact-recovery point has Phi -> -infinity (the log-divergence of
/// Phi and the linear stability change sign at the same alpha), so the free
/// energy comparison is only made explicitly on request.
inline bool perfect_recovery_predicate(const NetworkSpec& spec, double alpha, const ThresholdOptions& opt,
                                       const Quadrature& quad) {
  if (!(exact_recovery_growth(spec, alpha, quad).rate < 1.0)) return false;
  if (!opt.free_energy_limit_check) return true;
  const auto uninformed = se_solve(spec, alpha, InitKind::Uninformative, opt.solver, quad);
  if (uninformed.recovered(spec.rho_x())) return true;
  const auto limit = informed_branch_limit(spec, alpha, quad);
  if (limit.slope > kDivergenceSlopeTolerance) return true;  // Phi -> -infinity
  if (limit.slope < -kDivergenceSlopeTolerance) return false;
  SolverOptions full = opt.solver;
  full.early_exit = false;
  full.compute_free_energy = true;
  const auto un_full = se_solve(spec, alpha, InitKind::Uninformative, full, quad);
  return limit.offset <= un_full.free_energy;
}

inline double alpha_it_numeric(const NetworkSpec& spec, const ThresholdOptions& opt,
                               const Quadrature& quad = default_quadrature(), PredicateLog* log = nullptr) {
  spec.validate();
  PredicateLog local;
  PredicateLog& l = log ? *log : local;
  const double start = detail::bracket_start(spec);
  return detail::bisect_threshold([&](double a) { return perfect_recovery_predicate(spec, a, opt, quad); },
                                  0.5 * start, 3.0 * start, opt.resolution, l);
}

inline double alpha_it_numeric(const NetworkSpec& spec, double resolution = kDefaultResolution,
                               const Quadrature& quad = default_quadrature()) {
  return alpha_it_numeric(spec, default_threshold_options(resolution), quad);
}

// ---------------------------------------------------------------------------
// Algorithmic threshold
// ---------------------------------------------------------------------------

/// The uninformative branch gets below the recovery cut and the point it
/// heads for is exact recovery. Near alpha_IT some stacks (square linear
/// layers at rho = 1) have a fixed point with mmse below the cut but nonzero;
/// the stability check keeps that from counting.
inline bool algorithmic_recovery_predicate(const NetworkSpec& spec, double alpha, const ThresholdOptions& opt,
                                           const Quadrature& quad) {
  if (!(exact_recovery_growth(spec, alpha, quad).rate < 1.0)) return false;
  return se_solve(spec, alpha, InitKind::Uninformative, opt.solver, quad).recovered(spec.rho_x());
}

inline double alpha_alg_numeric(const NetworkSpec& spec, const ThresholdOptions& opt,
                                const Quadrature& quad = default_quadrature(), PredicateLog* log = nullptr) {
  spec.validate();
  PredicateLog local;
  PredicateLog& l = log ? *log : local;
  const double start = detail::bracket_start(spec);
  return detail::bisect_threshold([&](double a) { return algorithmic_recovery_predicate(spec, a, opt, quad); },
                                  0.5 * start, 3.0 * start, opt.resolution, l);
}

inline double alpha_alg_numeric(const NetworkSpec& spec, double resolution = kDefaultResolution,
                                const Quadrature& quad = default_quadrature()) {
  return alpha_alg_numeric(spec, default_threshold_options(resolution), quad);
}

// ---------------------------------------------------------------------------
// Report and regions
// ---------------------------------------------------------------------------

inline ThresholdReport compute_thresholds(const NetworkSpec& spec, const ThresholdOptions& opt,
                                          const Quadrature& quad = default_quadrature()) {
  spec.validate();
  ThresholdReport rep;
  rep.resolution = opt.resolution;
  if (uninformative_fixed_point_exists(spec)) {
    rep.alpha_c = alpha_c_numeric(spec, opt.resolution, quad);
    rep.alpha_c_method = Method::Numeric;
    if (spec.all_layers(LayerKind::LinearPass) && spec.prior.kind == PriorKind::Gaussian) {
      rep.alpha_c_analytic = alpha_c_analytic(spec);
    }
  }
  try {
    rep.alpha_it_counting = alpha_it_counting(spec);
  } catch (const UnsupportedOperation&) {
  }
  PredicateLog it_log, alg_log;
  rep.alpha_it = alpha_it_numeric(spec, opt, quad, &it_log);
  rep.alpha_alg = alpha_alg_numeric(spec, opt, quad, &alg_log);
  rep.delta_alg = std::max(0.0, rep.alpha_alg - rep.alpha_it);
  rep.predicates_monotone = it_log.monotone() && alg_log.monotone();
  return rep;
}

inline PhaseRegion phase_region(double alpha, const ThresholdReport& report) {
  if (report.alpha_c && alpha < *report.alpha_c) return PhaseRegion::Undetectable;
  if (alpha < report.alpha_it) return PhaseRegion::WeakRecovery;
  if (alpha < report.alpha_alg) return PhaseRegion::Hard;
  return PhaseRegion::Easy;
}

inline PhaseRegion phase_region(const NetworkSpec&, double alpha, const ThresholdReport& report) {
  return phase_region(alpha, report);
}

}  // namespace mlse
