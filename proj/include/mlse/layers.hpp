#pragma once

// Generative layers x = sigma(z) and latent priors: partition functions,
// posterior moments, the overlap updates Lambda_x / Lambda_out / Lambda_z and
// the potentials Psi_out / Psi_z.
//
// Conventions for a layer whose input has second moment p:
//   z  pre-activation, z | omega ~ N(omega, V) with omega = sqrt(s) eta, V = p - s
//   x  = sigma(z), observed through exp(-A x^2 / 2 + B x), B = r x + sqrt(r) n, A = r
// eta, n independent standard normals.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "mlse/errors.hpp"
#include "mlse/numerics.hpp"

namespace mlse {

enum class LayerKind { LinearPass, Relu };

inline const char* to_string(LayerKind kind) { return kind == LayerKind::LinearPass ? "linear" : "relu"; }

enum class PriorKind { Gaussian, GaussBernoulli };

struct LatentPrior {
  PriorKind kind = PriorKind::Gaussian;
  double sparsity = 1.0;

  static LatentPrior gaussian() { return {PriorKind::Gaussian, 1.0}; }
  static LatentPrior gauss_bernoulli(double rho_s) {
    if (!(rho_s > 0.0 && rho_s <= 1.0)) throw InvalidArgument("Gauss-Bernoulli sparsity must lie in (0, 1]");
    return {PriorKind::GaussBernoulli, rho_s};
  }

  /// Second moment of the latent entries.
  double second_moment() const { return kind == PriorKind::Gaussian ? 1.0 : sparsity; }
  bool operator==(const LatentPrior&) const = default;
};

struct LayerPoint {
  double b = 0.0;
  double a = 0.0;
  double omega = 0.0;
  double v = 1.0;
};

/// Posterior moments of (x, z) under exp(-A x^2/2 + B x) P(x|z) N(z; omega, V).
struct LayerPosterior {
  double log_z = 0.0;
  double mean_x = 0.0;
  double var_x = 0.0;
  double mean_z = 0.0;
  double var_z = 0.0;
};

/// Posterior mean/variance of a latent entry under exp(-A z^2/2 + B z) P_z(z).
struct PriorPosterior {
  double log_z = 0.0;
  double mean = 0.0;
  double var = 0.0;
};

/// Lambda_x, Lambda_out and Psi_out evaluated together (they share the integrand).
struct LayerTerms {
  double lambda_x = 0.0;
  double lambda_out = 0.0;
  double psi = 0.0;
};

struct StabilityCoeffs {
  double cxx = 0.0;  // (E[x^2])^2
  double cxz = 0.0;  // (E[xz])^2 / p^2
  double czz = 0.0;  // (E[z^2] - p)^2 / p^4
};

namespace detail {

inline void check_layer_point(const LayerPoint& p) {
  if (!(p.v > 0.0)) throw InvalidArgument("layer: cavity variance must be positive");
  if (!(p.a >= 0.0)) throw InvalidArgument("layer: precision A must be nonnegative");
}

inline void check_layer_overlaps(double r, double s, double rho_prev) {
  if (!(rho_prev > 0.0)) throw InvalidArgument("layer: input second moment must be positive");
  if (!(r >= 0.0) || !std::isfinite(r)) throw InvalidArgument("layer: field strength r must be finite and >= 0");
  if (!(s >= 0.0) || !(s < rho_prev)) {
    throw InvalidArgument("layer: overlap s=" + std::to_string(s) + " outside [0, " + std::to_string(rho_prev) + ")");
  }
}

// Gaussian factor exp(-A z^2/2 + B z) N(z; omega, V) integrated over the real line,
// and the resulting Gaussian posterior N(mu, sigma2).
struct GaussianProduct {
  double log_z;
  double mu;
  double sigma2;
};

inline GaussianProduct gaussian_product(double b, double a, double omega, double v) {
  const double den = 1.0 + a * v;
  return {(2.0 * b * omega + b * b * v - a * omega * omega) / (2.0 * den) - 0.5 * std::log(den),
          (omega + b * v) / den, v / den};
}

}  // namespace detail

/// Full posterior of a layer factor at one point (closed form for both kinds).
inline LayerPosterior layer_posterior(LayerKind kind, const LayerPoint& p) {
  detail::check_layer_point(p);
  const auto g = detail::gaussian_product(p.b, p.a, p.omega, p.v);
  if (kind == LayerKind::LinearPass) return {g.log_z, g.mu, g.sigma2, g.mu, g.sigma2};

  // ReLU: branch 0 is z < 0 (x = 0), branch 1 is z = x > 0.
  const double sv = std::sqrt(p.v);
  const double sigma = std::sqrt(g.sigma2);
  const double t0 = -p.omega / sv;
  const double t1 = g.mu / sigma;
  const auto s0 = normal_cdf_stats(t0);
  const auto s1 = normal_cdf_stats(t1);
  const double log_z0 = s0.log_cdf;
  const double log_z1 = g.log_z + s1.log_cdf;
  const double log_z = log_add_exp(log_z0, log_z1);
  const double pi1 = std::exp(log_z1 - log_z);
  const double pi0 = std::exp(log_z0 - log_z);

  const auto& m0 = s0.moments;  // for -(z - omega)/sqrt(V)
  const auto& m1 = s1.moments;
  const double mean0 = p.omega - sv * m0.mean;
  const double var0 = p.v * m0.variance;
  const double mean1 = g.mu + sigma * m1.mean;
  const double var1 = g.sigma2 * m1.variance;

  LayerPosterior out;
  out.log_z = log_z;
  out.mean_x = pi1 * mean1;
  out.var_x = pi1 * var1 + pi0 * pi1 * mean1 * mean1;
  out.mean_z = pi0 * mean0 + pi1 * mean1;
  const double gap = mean1 - mean0;
  out.var_z = pi0 * var0 + pi1 * var1 + pi0 * pi1 * gap * gap;
  if (!std::isfinite(out.log_z) || !std::isfinite(out.mean_z) || !std::isfinite(out.var_z)) {
    throw NumericDomainError("relu layer posterior is not finite", p.omega);
  }
  return out;
}

inline double layer_log_partition(LayerKind kind, const LayerPoint& p) {
  const double v = layer_posterior(kind, p).log_z;
  if (!std::isfinite(v)) throw NumericDomainError("layer log-partition diverged", p.omega);
  return v;
}

namespace detail {

inline LayerTerms linear_layer_terms(double r, double s, double p) {
  const double v = p - s;
  const double den = 1.0 + r * v;
  return {p - v / den, r / den, -0.5 * std::log1p(r * v) + 0.5 * r * p};
}

// Accumulates posterior statistics over the true generative measure of a
// ReLU layer. z ~ N(0, p) is split at the kink; near z = 0 the posterior
// changes on the scales sqrt(V) and 1/sqrt(r), so that stretch gets
// geometrically refined panels and the rest a Gauss rule for the tail. omega | z and the
// output noise use the inner rule.
inline LayerTerms relu_layer_terms(double r, double s, double p, const Quadrature& quad) {
  const double v = std::max(p - s, 1e-300);
  const double sr = std::sqrt(r);
  const double omega_slope = s / p;
  const double omega_sd = std::sqrt(s * v / p);
  const auto& inner = quad.inner;
  const double sp = std::sqrt(p);
  // kink width: prior spread sqrt(V), or the output noise 1/sqrt(r) when sharper
  const double coarse = std::sqrt(v / p);
  const double fine = r > 0.0 ? std::min(coarse, 1.0 / std::sqrt(r * p)) : coarse;
  const QuadratureRule* pieces[] = {&quad.kink_rule(fine, coarse), &quad.half_tail};

  double e_mean_x2 = 0.0, e_g2 = 0.0, e_log_z = 0.0;
  for (int side = 0; side < 2; ++side) {
    for (const QuadratureRule* rule : pieces) {
    const auto& half = *rule;
    for (std::size_t i = 0; i < half.size(); ++i) {
      const double z = (side == 0 ? sp : -sp) * half.nodes[i];
      const double x = std::max(z, 0.0);
      double acc_x2 = 0.0, acc_g2 = 0.0, acc_lz = 0.0;
      for (std::size_t j = 0; j < inner.size(); ++j) {
        const double omega = omega_slope * z + omega_sd * inner.nodes[j];
        for (std::size_t k = 0; k < inner.size(); ++k) {
          const double b = r * x + sr * inner.nodes[k];
          const auto post = layer_posterior(LayerKind::Relu, {b, r, omega, v});
          const double g = (post.mean_z - omega) / v;
          const double w = inner.weights[j] * inner.weights[k];
          acc_x2 += w * post.mean_x * post.mean_x;
          acc_g2 += w * g * g;
          acc_lz += w * post.log_z;
        }
      }
      e_mean_x2 += half.weights[i] * acc_x2;
      e_g2 += half.weights[i] * acc_g2;
      e_log_z += half.weights[i] * acc_lz;
    }
    }
  }
  return {std::clamp(e_mean_x2, 0.0, 0.5 * p), e_g2, e_log_z};
}

}  // namespace detail

/// Lambda_x, Lambda_out and Psi_out at (r, s) for a layer with input second moment rho_prev.
inline LayerTerms layer_terms(LayerKind kind, double r, double s, double rho_prev, const Quadrature& quad) {
  detail::check_layer_overlaps(r, s, rho_prev);
  if (kind == LayerKind::LinearPass) return detail::linear_layer_terms(r, s, rho_prev);
  return detail::relu_layer_terms(r, s, rho_prev, quad);
}

inline double layer_update_x(LayerKind kind, double r, double s, double rho_prev, const Quadrature& quad) {
  return layer_terms(kind, r, s, rho_prev, quad).lambda_x;
}

inline double layer_update_out(LayerKind kind, double r, double s, double rho_prev, const Quadrature& quad) {
  return layer_terms(kind, r, s, rho_prev, quad).lambda_out;
}

inline double layer_potential(LayerKind kind, double r, double s, double rho_prev, const Quadrature& quad) {
  return layer_terms(kind, r, s, rho_prev, quad).psi;
}

/// Second moment of the layer output given the input second moment.
inline double layer_output_moment(LayerKind kind, double rho_prev) {
  return kind == LayerKind::LinearPass ? rho_prev : 0.5 * rho_prev;
}

/// [rho_z, rho_1, ..., rho_L]: second moments of each variable from the latent upward.
inline std::vector<double> second_moment_propagate(const std::vector<LayerKind>& layers, double rho_z) {
  if (!(rho_z > 0.0)) throw InvalidArgument("second_moment_propagate: rho_z must be positive");
  std::vector<double> out{rho_z};
  out.reserve(layers.size() + 1);
  for (LayerKind kind : layers) out.push_back(layer_output_moment(kind, out.back()));
  return out;
}

/// Zero-overlap expansion coefficients of a layer (only layers with an unbiased output).
inline StabilityCoeffs layer_stability_coeffs(LayerKind kind, double rho_prev, const Quadrature& quad) {
  if (kind == LayerKind::Relu) {
    throw UnsupportedOperation("layer_stability_coeffs: relu output has nonzero mean, no zero-overlap fixed point");
  }
  if (!(rho_prev > 0.0)) throw InvalidArgument("layer_stability_coeffs: rho_prev must be positive");
  // Moments under the prior-predictive measure, x = z ~ N(0, p).
  const double sp = std::sqrt(rho_prev);
  const double exx = expect_gaussian_1d([&](double u) { return sp * u * sp * u; }, quad.gh);
  const double exz = exx;
  const double ezz = exx;
  const double p2 = rho_prev * rho_prev;
  return {exx * exx, exz * exz / p2, (ezz - rho_prev) * (ezz - rho_prev) / (p2 * p2)};
}

// ---------------------------------------------------------------------------
// Latent priors
// ---------------------------------------------------------------------------

inline PriorPosterior prior_posterior(const LatentPrior& prior, double b, double a) {
  if (!(a >= 0.0)) throw InvalidArgument("prior: precision A must be nonnegative");
  const double den = 1.0 + a;
  const double log_g = 0.5 * b * b / den - 0.5 * std::log(den);
  const double mean_g = b / den;
  const double var_g = 1.0 / den;
  if (prior.kind == PriorKind::Gaussian || prior.sparsity >= 1.0) return {log_g, mean_g, var_g};
  const double rs = prior.sparsity;
  const double log_on = std::log(rs) + log_g;
  const double log_off = std::log1p(-rs);
  const double log_z = log_add_exp(log_on, log_off);
  const double pi = std::exp(log_on - log_z);
  const double mean = pi * mean_g;
  return {log_z, mean, pi * var_g + pi * (1.0 - pi) * mean_g * mean_g};
}

inline double prior_log_partition(const LatentPrior& prior, double b, double a) {
  return prior_posterior(prior, b, a).log_z;
}

struct PriorTerms {
  double lambda_z = 0.0;
  double psi = 0.0;
};

/// Lambda_z(t) and Psi_z(t), expectations over z ~ P_z and B = t z + sqrt(t) n.
inline PriorTerms prior_terms(const LatentPrior& prior, double t, const Quadrature& quad) {
  if (!(t >= 0.0) || !std::isfinite(t)) throw InvalidArgument("prior: t must be finite and >= 0");
  if (prior.kind == PriorKind::Gaussian || prior.sparsity >= 1.0) {
    return {t / (1.0 + t), -0.5 * std::log1p(t) + 0.5 * t};
  }
  const double rs = prior.sparsity;
  const auto branch = [&](double b_scale, const QuadratureRule& rule) {
    double m2 = 0.0, lz = 0.0;
    for (std::size_t i = 0; i < rule.size(); ++i) {
      const auto post = prior_posterior(prior, b_scale * rule.nodes[i], t);
      m2 += rule.weights[i] * post.mean * post.mean;
      lz += rule.weights[i] * post.log_z;
    }
    return std::pair{m2, lz};
  };
  // On the nonzero branch the posterior weight switches at |n| ~ 1/sqrt(t)
  // with a width of the same order, so that rule is refined toward 0.
  const auto on_rule = zero_refined_gaussian_rule(0.5 / std::sqrt(1.0 + t), quad.panel_points);
  const auto [m2_off, lz_off] = branch(std::sqrt(t), quad.composite);
  const auto [m2_on, lz_on] = branch(std::sqrt(t * t + t), on_rule);
  const double lambda = (1.0 - rs) * m2_off + rs * m2_on;
  return {std::clamp(lambda, 0.0, rs), (1.0 - rs) * lz_off + rs * lz_on};
}

inline double prior_update(const LatentPrior& prior, double t, const Quadrature& quad) {
  return prior_terms(prior, t, quad).lambda_z;
}

inline double prior_potential(const LatentPrior& prior, double t, const Quadrature& quad) {
  return prior_terms(prior, t, quad).psi;
}

}  // namespace mlse
