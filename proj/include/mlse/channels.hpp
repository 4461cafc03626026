#pragma once

// Noiseless measurement channels y = phi(x): the scalar partition function
// Z_y(y; omega, V), its update Lambda_y and potential Psi_y, and the
// expansion coefficient of Lambda_y around zero overlap.

#include <algorithm>
#include <cmath>
#include <string>

#include "mlse/errors.hpp"
#include "mlse/numerics.hpp"

namespace mlse {

enum class ChannelKind { Linear, Abs };

inline const char* to_string(ChannelKind kind) { return kind == ChannelKind::Linear ? "linear" : "abs"; }

/// Cavity mean/variance of the pre-activation and the observed value.
struct ChannelPoint {
  double omega = 0.0;
  double v = 1.0;
  double y = 0.0;
};

/// Smallest conditional variance used anywhere; the noiseless channel is
/// singular at perfect overlap.
inline constexpr double kVarianceFloor = 1e-12;

/// Output-side derivatives of log Z_y with respect to omega.
struct ChannelOutput {
  double g = 0.0;   // d/domega log Z
  double dg = 0.0;  // d^2/domega^2 log Z
};

namespace detail {

inline void check_channel_overlap(double q, double rho_x, const char* who) {
  if (!(rho_x > 0.0)) throw InvalidArgument(std::string(who) + ": rho_x must be positive");
  if (!(q >= 0.0) || !(q < rho_x)) {
    throw InvalidArgument(std::string(who) + ": overlap q=" + std::to_string(q) + " outside [0, rho_x=" +
                          std::to_string(rho_x) + ")");
  }
}

inline double conditional_variance(double q, double rho_x) { return std::max(rho_x - q, kVarianceFloor); }

// 1 - tanh(a) for a >= 0 without cancellation.
inline double one_minus_tanh(double a) {
  const double e = std::exp(-2.0 * a);
  return 2.0 * e / (1.0 + e);
}

// Posterior mean of x given y=|x| minus omega, for x ~ N(omega, V). Written
// in terms of x (the sign of x is irrelevant since the result is even in x).
inline double abs_mean_offset(double x, double omega, double v) {
  const double a = x * omega / v;
  if (a >= 0.0) return (x - omega) - x * one_minus_tanh(a);
  return -(x + omega) + x * one_minus_tanh(-a);
}

}  // namespace detail

/// log Z_y(y; omega, V). For Abs the density is over y >= 0.
inline double channel_log_partition(ChannelKind kind, const ChannelPoint& p) {
  if (!(p.v > 0.0)) throw InvalidArgument("channel_log_partition: variance must be positive");
  if (kind == ChannelKind::Linear) {
    const double d = p.y - p.omega;
    return -0.5 * std::log(p.v) - kLogSqrt2Pi - 0.5 * d * d / p.v;
  }
  if (p.y < 0.0) throw InvalidArgument("channel_log_partition: Abs channel needs y >= 0");
  // N(y; w, V) + N(-y; w, V) = N(|y|-|w|; 0, V) (1 + exp(-2|y w|/V))
  const double d = std::abs(p.y) - std::abs(p.omega);
  const double a = std::abs(p.y * p.omega) / p.v;
  return -0.5 * std::log(p.v) - kLogSqrt2Pi - 0.5 * d * d / p.v + std::log1p(std::exp(-2.0 * a));
}

/// g and dg of the channel at one observation, as used by message passing.
inline ChannelOutput channel_output(ChannelKind kind, const ChannelPoint& p) {
  const double v = std::max(p.v, kVarianceFloor);
  if (kind == ChannelKind::Linear) return {(p.y - p.omega) / v, -1.0 / v};
  const double g = detail::abs_mean_offset(p.y, p.omega, v) / v;
  const double a = p.y * p.omega / v;
  const double sech = 1.0 / std::cosh(std::min(std::abs(a), 350.0));
  const double posterior_var = p.y * p.y * sech * sech;
  return {g, (posterior_var - v) / (v * v)};
}

namespace detail {

// G(m) = E[v^2 sech(sqrt(m) kappa v)] over independent standard normals.
// For the Abs channel, E[Var(x | y, omega)] = V sqrt(V / rho_x) G(q / rho_x),
// which removes the sharp tanh(y omega / V) dependence from the integrand.
inline double abs_sech_moment(double m, const QuadratureRule& sym) {
  const double sm = std::sqrt(std::max(m, 0.0));
  const std::size_t half = sym.size() / 2;  // the rule is symmetric; use the positive half
  double acc = 0.0;
  for (std::size_t i = half; i < sym.size(); ++i) {
    const double v = sym.nodes[i];
    double row = 0.0;
    for (std::size_t j = half; j < sym.size(); ++j) {
      const double w = sm * sym.nodes[j] * v;
      const double e = std::exp(-w);
      row += sym.weights[j] * 2.0 * e / (1.0 + e * e);
    }
    acc += sym.weights[i] * v * v * row;
  }
  return 4.0 * acc;
}

}  // namespace detail

/// Lambda_y(q) = E[(d_omega log Z_y)^2] at omega = sqrt(q) xi, V = rho_x - q,
/// the expectation running over xi and the observation.
inline double channel_update(ChannelKind kind, double q, double rho_x, const Quadrature& quad) {
  detail::check_channel_overlap(q, rho_x, "channel_update");
  const double v = detail::conditional_variance(q, rho_x);
  if (kind == ChannelKind::Linear) return 1.0 / v;
  // E[g^2] = 1/V - E[Var(x | y, omega)] / V^2
  const double g = detail::abs_sech_moment(q / rho_x, quad.composite);
  return std::max(0.0, (1.0 - std::sqrt(v / rho_x) * g) / v);
}

/// Psi_y(q) = E[log Z_y(y; sqrt(q) xi, rho_x - q)] over xi and y.
inline double channel_potential(ChannelKind kind, double q, double rho_x, const Quadrature& quad) {
  detail::check_channel_overlap(q, rho_x, "channel_potential");
  const double v = detail::conditional_variance(q, rho_x);
  if (kind == ChannelKind::Linear) return -0.5 * std::log(v) - kLogSqrt2Pi - 0.5;
  // Psi(0) plus half the integral of Lambda_y, the latter split into its
  // 1/V part and a smooth remainder in s = sqrt(V / rho_x).
  const double psi0 = std::log(2.0) - 0.5 * std::log(rho_x) - kLogSqrt2Pi - 0.5;
  const double s_q = std::sqrt(v / rho_x);
  static const auto legendre = detail::gauss_legendre_unit(24);
  double remainder = 0.0;
  for (std::size_t i = 0; i < legendre.size(); ++i) {
    const double s = s_q + (1.0 - s_q) * legendre.nodes[i];
    remainder += legendre.weights[i] * detail::abs_sech_moment(1.0 - s * s, quad.composite);
  }
  remainder *= (1.0 - s_q);
  return psi0 + 0.5 * std::log(rho_x / v) - remainder;
}

/// Direct two-dimensional quadrature of Lambda_y and Psi_y over (xi, u) with
/// x = sqrt(q) xi + sqrt(V) u. Slowly convergent near q -> rho_x; kept as a
/// cross-check of the reduced forms above.
struct DirectChannelIntegrals {
  double update = 0.0;
  double potential = 0.0;
};

inline DirectChannelIntegrals channel_integrals_direct(double q, double rho_x, const QuadratureRule& rule) {
  detail::check_channel_overlap(q, rho_x, "channel_integrals_direct");
  const double v = detail::conditional_variance(q, rho_x);
  const double sq = std::sqrt(q);
  const double sv = std::sqrt(v);
  DirectChannelIntegrals out;
  out.update = expect_gaussian_2d(
      [&](double xi, double u) {
        const double omega = sq * xi;
        const double g = detail::abs_mean_offset(omega + sv * u, omega, v) / v;
        return g * g;
      },
      rule);
  out.potential = expect_gaussian_2d(
      [&](double xi, double u) {
        const double omega = sq * xi;
        return channel_log_partition(ChannelKind::Abs, {omega, v, std::abs(omega + sv * u)});
      },
      rule);
  return out;
}

/// Coefficient c_y = (1/rho_x^2) E_y[(E_{Q_y^0}[rho_x - x^2])^2] of the
/// small-overlap expansion. It is scale free; the slope of Lambda_y at zero
/// overlap is c_y / rho_x^2.
inline double channel_stability_coeff(ChannelKind kind, double rho_x, const Quadrature& quad) {
  if (kind == ChannelKind::Linear) {
    throw UnsupportedOperation("channel_stability_coeff: linear channel has no zero-overlap fixed point");
  }
  if (!(rho_x > 0.0)) throw InvalidArgument("channel_stability_coeff: rho_x must be positive");
  // Under Q_y^0 the posterior of x given y=|x| is +-y, so E[x^2 | y] = y^2.
  const double sr = std::sqrt(rho_x);
  const double m = expect_gaussian_1d(
      [&](double u) {
        const double x = sr * u;
        const double d = rho_x - x * x;
        return d * d;
      },
      quad.gh);
  return m / (rho_x * rho_x);
}

/// Slope of Lambda_y at zero overlap.
inline double channel_stability_slope(ChannelKind kind, double rho_x, const Quadrature& quad) {
  return channel_stability_coeff(kind, rho_x, quad) / (rho_x * rho_x);
}

}  // namespace mlse
