#pragma once

// State evolution of the multi-layer model: the overlap update sweep, the
// damped fixed-point solver, the free energy and one-dimensional landscape
// slices of it.

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "mlse/channels.hpp"
#include "mlse/errors.hpp"
#include "mlse/layers.hpp"
#include "mlse/network.hpp"
#include "mlse/numerics.hpp"

namespace mlse {

/// Overlaps q and conjugates qhat. q[i], qhat[i] belong to h_{i+1}: index 0 is
/// the latent z, index L-1 the last hidden layer; the signal x is separate.
struct OverlapState {
  double q_x = 0.0;
  double qhat_x = 0.0;
  std::vector<double> q;
  std::vector<double> qhat;

  bool operator==(const OverlapState&) const = default;
};

enum class InitKind { Informed, Uninformative };

inline const char* to_string(InitKind init) { return init == InitKind::Informed ? "informed" : "uninformative"; }

/// Relative distance to the second moment kept between any overlap and its
/// upper bound (the noiseless problem is singular at perfect overlap).
inline constexpr double kOverlapCeiling = 1e-12;
/// mmse below this fraction of rho_x counts as exact recovery.
inline constexpr double kRecoveryFraction = 1e-6;

struct SolverOptions {
  double damping = 0.0;  // raised adaptively when the iteration oscillates
  double max_damping = 0.9;
  double tol = 1e-10;
  int max_iter = 5000;
  double epsilon = 1e-6;  // uninformative starting overlap
  double informed_gap = 1e-6;  // informed start at rho (1 - gap)
  // Stop as soon as the outcome of a recovery test is settled: mmse far below
  // the recovery cut, or (informed start) mmse clearly above it.
  bool early_exit = false;
  // With early_exit: also declare recovery once the mmse sequence decays
  // geometrically toward a limit (Aitken extrapolation) below the recovery
  // cut. Resolves slow continuous transitions without 1e5+ iterations.
  bool extrapolate_recovery = false;
  bool compute_free_energy = true;
};

struct FixedPointResult {
  OverlapState state;
  double mmse = 0.0;
  double free_energy = std::numeric_limits<double>::quiet_NaN();
  int iterations = 0;
  bool converged = false;
  InitKind init = InitKind::Uninformative;
  double residual = std::numeric_limits<double>::infinity();
  double final_damping = 0.0;
  bool recovery_extrapolated = false;

  bool recovered(double rho_x) const { return recovery_extrapolated || mmse < kRecoveryFraction * rho_x; }
};

namespace detail {

struct SeContext {
  const NetworkSpec& spec;
  std::vector<double> moments;  // rho_1 .. rho_{L+1}
  double rho_x;

  explicit SeContext(const NetworkSpec& s) : spec(s), moments(s.second_moments()), rho_x(moments.back()) {}

  double cap(std::size_t var) const { return moments[var] * (1.0 - kOverlapCeiling); }
};

inline double clamp_overlap(double q, double cap) {
  if (!std::isfinite(q)) throw NumericDomainError("overlap update produced a non-finite value");
  return std::clamp(q, 0.0, cap);
}

inline double check_hat(double qhat) {
  if (!std::isfinite(qhat) || qhat < 0.0) {
    throw NumericDomainError("conjugate overlap update produced an invalid value " + std::to_string(qhat));
  }
  return qhat;
}

inline void check_state_shape(const NetworkSpec& spec, const OverlapState& state) {
  if (state.q.size() != spec.depth() || state.qhat.size() != spec.depth()) {
    throw InvalidArgument("overlap state has " + std::to_string(state.q.size()) + " layer entries, spec has depth " +
                          std::to_string(spec.depth()));
  }
}

// Prior-side sweep with a fixed conjugate on the top variable: hats downward,
// overlaps upward, returning the overlap of the top variable.
inline double prior_side_sweep(const SeContext& ctx, double qhat_top, OverlapState& st, const Quadrature& quad) {
  const auto& layers = ctx.spec.layers;
  const std::size_t depth = layers.size();
  if (depth == 0) return prior_update(ctx.spec.prior, qhat_top, quad);
  for (std::size_t j = depth; j-- > 0;) {
    const double r = (j + 1 == depth) ? qhat_top : st.qhat[j + 1];
    const double lambda_out = layer_update_out(layers[j].kind, r, st.q[j], ctx.moments[j], quad);
    st.qhat[j] = check_hat(layers[j].beta * lambda_out);
  }
  st.q[0] = clamp_overlap(prior_update(ctx.spec.prior, st.qhat[0], quad), ctx.cap(0));
  for (std::size_t j = 0; j + 1 < depth; ++j) {
    st.q[j + 1] = clamp_overlap(layer_update_x(layers[j].kind, st.qhat[j + 1], st.q[j], ctx.moments[j], quad),
                                ctx.cap(j + 1));
  }
  return layer_update_x(layers[depth - 1].kind, qhat_top, st.q[depth - 1], ctx.moments[depth - 1], quad);
}

// Watches a decreasing sequence m_t; reports when its geometric ratio has
// settled and the Aitken limit lies far below the recovery cut.
class GeometricTail {
 public:
  bool push(double m, double rho_x) {
    hist_.push_back(m);
    const std::size_t n = hist_.size();
    if (n < 3) return false;
    const double d1 = hist_[n - 2] - hist_[n - 1];
    const double d2 = hist_[n - 3] - hist_[n - 2];
    ratios_.push_back(d2 > 0.0 && d1 > 0.0 ? d1 / d2 : std::numeric_limits<double>::quiet_NaN());
    const std::size_t k = ratios_.size();
    if (m > 1e-3 * rho_x || k <= kWindow) return false;
    const double r = ratios_[k - 1];
    const double r_old = ratios_[k - 1 - kWindow];
    if (!(r > 0.0 && r < 1.0) || !(r_old > 0.0)) return false;
    if (std::abs(r - r_old) > 1e-3 * (1.0 - r)) return false;
    const double limit = m - d1 * r / (1.0 - r);
    return limit < 1e-2 * kRecoveryFraction * rho_x;
  }

 private:
  static constexpr std::size_t kWindow = 10;
  std::vector<double> hist_;
  std::vector<double> ratios_;
};

}  // namespace detail

/// Zero state with the right number of layer entries.
inline OverlapState zero_state(const NetworkSpec& spec) {
  OverlapState s;
  s.q.assign(spec.depth(), 0.0);
  s.qhat.assign(spec.depth(), 0.0);
  return s;
}

/// One sweep of the fixed-point equations: qhat_x, then the hats downward,
/// then the overlaps upward ending with q_x.
inline OverlapState se_step(const NetworkSpec& spec, double alpha, const OverlapState& state, const Quadrature& quad) {
  if (!(alpha >= 0.0) || !std::isfinite(alpha)) throw InvalidArgument("se_step: alpha must be finite and >= 0");
  detail::check_state_shape(spec, state);
  const detail::SeContext ctx(spec);
  OverlapState next = state;
  next.qhat_x = detail::check_hat(alpha * channel_update(spec.channel, state.q_x, ctx.rho_x, quad));
  const double top = detail::prior_side_sweep(ctx, next.qhat_x, next, quad);
  next.q_x = detail::clamp_overlap(top, ctx.cap(spec.depth()));
  return next;
}

/// Phi = -(replica potential); its global minimum is the Bayes-optimal branch.
///   f = -1/2 sum_l c_l q_l qhat_l + c_1 Psi_z(qhat_1) + sum_j c_{j+1} Psi_out^(j)(qhat_{j+1}, q_j)
///       + alpha Psi_y(q_x),   c_l = k_l / d
inline double free_energy(const NetworkSpec& spec, double alpha, const OverlapState& state, const Quadrature& quad) {
  detail::check_state_shape(spec, state);
  const detail::SeContext ctx(spec);
  const auto c = spec.widths();
  const std::size_t depth = spec.depth();
  const auto q_of = [&](std::size_t var) { return var == depth ? state.q_x : state.q[var]; };
  const auto qhat_of = [&](std::size_t var) { return var == depth ? state.qhat_x : state.qhat[var]; };

  double f = alpha * channel_potential(spec.channel, q_of(depth), ctx.rho_x, quad);
  for (std::size_t var = 0; var <= depth; ++var) f -= 0.5 * c[var] * q_of(var) * qhat_of(var);
  f += c[0] * prior_potential(spec.prior, qhat_of(0), quad);
  for (std::size_t j = 0; j < depth; ++j) {
    f += c[j + 1] * layer_potential(spec.layers[j].kind, qhat_of(j + 1), q_of(j), ctx.moments[j], quad);
  }
  if (!std::isfinite(f)) throw NumericDomainError("free energy is not finite");
  return -f;
}

/// Starting point of the iteration.
inline OverlapState initial_state(const NetworkSpec& spec, InitKind init, const SolverOptions& opt) {
  const detail::SeContext ctx(spec);
  OverlapState s = zero_state(spec);
  const auto start = [&](std::size_t var) {
    return init == InitKind::Informed ? ctx.moments[var] * (1.0 - opt.informed_gap)
                                      : std::min(opt.epsilon, ctx.cap(var));
  };
  for (std::size_t var = 0; var < spec.depth(); ++var) s.q[var] = start(var);
  s.q_x = start(spec.depth());
  return s;
}

/// Damped iteration of se_step to a fixed point. Non-convergence is reported
/// through the result, not thrown.
inline FixedPointResult se_solve(const NetworkSpec& spec, double alpha, InitKind init, const SolverOptions& opt,
                                 const Quadrature& quad = default_quadrature()) {
  spec.validate();
  if (!(opt.damping >= 0.0 && opt.damping < 1.0)) throw InvalidArgument("se_solve: damping must lie in [0, 1)");
  if (!(opt.tol > 0.0)) throw InvalidArgument("se_solve: tol must be positive");
  if (opt.max_iter < 1) throw InvalidArgument("se_solve: max_iter must be positive");

  const double rho_x = spec.rho_x();
  FixedPointResult res;
  res.init = init;
  OverlapState state = initial_state(spec, init, opt);
  double gamma = opt.damping;
  double prev_step = 0.0;
  int flips = 0;
  detail::GeometricTail tail;

  for (int it = 1; it <= opt.max_iter; ++it) {
    const OverlapState proposal = se_step(spec, alpha, state, quad);
    OverlapState next = proposal;
    if (gamma > 0.0 && it > 1) {
      const auto mix = [&](double a, double b) { return (1.0 - gamma) * a + gamma * b; };
      next.q_x = mix(proposal.q_x, state.q_x);
      next.qhat_x = mix(proposal.qhat_x, state.qhat_x);
      for (std::size_t i = 0; i < next.q.size(); ++i) {
        next.q[i] = mix(proposal.q[i], state.q[i]);
        next.qhat[i] = mix(proposal.qhat[i], state.qhat[i]);
      }
    }
    double residual = std::abs(next.q_x - state.q_x);
    for (std::size_t i = 0; i < next.q.size(); ++i) residual = std::max(residual, std::abs(next.q[i] - state.q[i]));

    // Oscillation of q_x (sign flips of successive steps) calls for more damping.
    const double step = next.q_x - state.q_x;
    if (it > 2 && step * prev_step < 0.0 && std::abs(step) > opt.tol) {
      if (++flips >= 2) {
        gamma = std::min(opt.max_damping, std::max(0.5, gamma + 0.2));
        flips = 0;
      }
    } else {
      flips = 0;
    }
    prev_step = step;

    state = std::move(next);
    res.iterations = it;
    res.residual = residual;
    const double mmse = rho_x - state.q_x;
    if (it > 1 && residual < opt.tol) {
      res.converged = true;
      break;
    }
    if (opt.early_exit) {
      if (mmse < 1e-2 * kRecoveryFraction * rho_x) break;
      if (init == InitKind::Informed && mmse > 10.0 * kRecoveryFraction * rho_x) break;
      if (opt.extrapolate_recovery && tail.push(mmse, rho_x)) {
        res.recovery_extrapolated = true;
        break;
      }
    }
  }
  res.state = state;
  res.mmse = std::max(0.0, rho_x - state.q_x);
  res.final_damping = gamma;
  if (opt.compute_free_energy) res.free_energy = free_energy(spec, alpha, state, quad);
  return res;
}

inline constexpr double kLandscapeLogTolerance = 1e-9;

struct LandscapePoint {
  double q_x = 0.0;
  double phi = std::numeric_limits<double>::quiet_NaN();
  double qhat_x = 0.0;
  bool ok = false;
  std::string note;
};

/// Free energy along q_x with every other overlap at its stationary value
/// given q_x. qhat_x is fixed by q_x = Lambda_x(qhat_x, q_L), the stationarity
/// condition in qhat_x, so that dPhi/dq_x = (qhat_x - alpha Lambda_y(q_x)) / 2.
inline std::vector<LandscapePoint> landscape_profile(const NetworkSpec& spec, double alpha,
                                                     const std::vector<double>& qx_grid,
                                                     const Quadrature& quad = default_quadrature(),
                                                     double inner_tol = 1e-10, int inner_max_iter = 5000) {
  spec.validate();
  const detail::SeContext ctx(spec);
  std::vector<LandscapePoint> out;
  out.reserve(qx_grid.size());
  OverlapState warm = initial_state(spec, InitKind::Uninformative, SolverOptions{});

  // Overlap of the top variable once the prior side has relaxed at fixed qhat_x.
  const auto relax = [&](double qhat_top, OverlapState& st, bool& converged) {
    converged = false;
    double top = 0.0;
    for (int it = 0; it < inner_max_iter; ++it) {
      const auto before = st.q;
      top = detail::prior_side_sweep(ctx, qhat_top, st, quad);
      double change = 0.0;
      for (std::size_t i = 0; i < st.q.size(); ++i) {
        const double gap = std::max(ctx.moments[i] - st.q[i], 1e-300);  // relative to the distance from exact recovery
        change = std::max(change, std::abs(st.q[i] - before[i]) / gap);
      }
      if (change < inner_tol) {
        converged = true;
        break;
      }
    }
    return top;
  };

  for (double qx : qx_grid) {
    LandscapePoint pt;
    pt.q_x = qx;
    try {
      if (!(qx >= 0.0 && qx < ctx.rho_x)) throw InvalidArgument("grid value outside [0, rho_x)");
      // top(qhat_x) is increasing; solve log(rho_x - top) = log(rho_x - q_x)
      // in log qhat_x, where the relation is close to linear.
      bool ok = true;
      OverlapState st = warm;
      const double floor_top = relax(0.0, st, ok);
      if (floor_top > qx) throw NumericDomainError("q_x below the overlap reached without measurements");
      const double target = std::log(ctx.rho_x - qx);
      const auto h = [&](double u) { return std::log(std::max(ctx.rho_x - relax(std::exp(u), st, ok), 1e-300)) - target; };
      double ua = std::log(1e-6), ha = h(ua);
      while (ha < 0.0) {  // already past the target: move down
        ua -= std::log(16.0);
        if (ua < std::log(1e-30)) break;
        ha = h(ua);
      }
      double ub = ua, hb = ha;
      while (hb > 0.0) {
        ua = ub;
        ha = hb;
        ub += std::log(4.0);
        if (ub > std::log(1e16)) throw NumericDomainError("target overlap not reachable");
        hb = h(ub);
      }
      double u = ub;
      if (ha > 0.0) {
        int side = 0;
        for (int it = 0; it < 200 && std::abs(ub - ua) > 1e-13; ++it) {
          u = (ua * hb - ub * ha) / (hb - ha);
          const double hu = h(u);
          if (std::abs(hu) < kLandscapeLogTolerance) break;
          if (hu > 0.0) {
            ua = u;
            ha = hu;
            if (side == 1) hb *= 0.5;
            side = 1;
          } else {
            ub = u;
            hb = hu;
            if (side == -1) ha *= 0.5;
            side = -1;
          }
        }
      }
      pt.qhat_x = std::exp(u);
      const double top = relax(pt.qhat_x, st, ok);
      st.q_x = qx;
      st.qhat_x = pt.qhat_x;
      pt.phi = free_energy(spec, alpha, st, quad);
      pt.ok = ok && std::abs(std::log((ctx.rho_x - top) / (ctx.rho_x - qx))) < 10.0 * kLandscapeLogTolerance;
      if (!pt.ok) pt.note = "inner fixed point not resolved";
      warm = st;
    } catch (const std::exception& e) {
      pt.ok = false;
      pt.note = e.what();
    }
    out.push_back(pt);
  }
  return out;
}

/// Indices of local minima of a profile (interior points and endpoints),
/// skipping flagged points.
inline std::vector<std::size_t> landscape_minima(const std::vector<LandscapePoint>& profile) {
  std::vector<std::size_t> valid;
  for (std::size_t i = 0; i < profile.size(); ++i) {
    if (profile[i].ok) valid.push_back(i);
  }
  std::vector<std::size_t> minima;
  for (std::size_t k = 0; k < valid.size(); ++k) {
    const double here = profile[valid[k]].phi;
    const bool left = k == 0 || here < profile[valid[k - 1]].phi;
    const bool right = k + 1 == valid.size() || here < profile[valid[k + 1]].phi;
    if (left && right) minima.push_back(valid[k]);
  }
  return minima;
}

}  // namespace mlse
