#pragma once

// Gaussian quadrature, normal-distribution helpers, and a counter-based
// Monte Carlo oracle.

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <limits>
#include <map>
#include <memory>
#include <mutex>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include "mlse/errors.hpp"

namespace mlse {

inline constexpr double kInvSqrt2Pi = 0.3989422804014326779399460599343819;
inline constexpr double kLogSqrt2Pi = 0.9189385332046727417803297364056176;

// ---------------------------------------------------------------------------
// Standard normal helpers
// ---------------------------------------------------------------------------

inline double normal_pdf(double t) { return kInvSqrt2Pi * std::exp(-0.5 * t * t); }

inline double normal_cdf(double t) { return 0.5 * std::erfc(-t / std::numbers::sqrt2); }

/// log(1 + e^x) without overflow.
inline double log1p_exp(double x) {
  if (x > 0.0) return x + std::log1p(std::exp(-x));
  return std::log1p(std::exp(x));
}

/// log(e^a + e^b).
inline double log_add_exp(double a, double b) {
  if (a == -std::numeric_limits<double>::infinity()) return b;
  if (b == -std::numeric_limits<double>::infinity()) return a;
  return a > b ? a + std::log1p(std::exp(b - a)) : b + std::log1p(std::exp(a - b));
}

namespace detail {

// Tail of the Laplace continued fraction for the Mills ratio
//   R(x) = 1 / (x + K1),  K_k = k / (x + K_{k+1}).
// Returns {K1, K2}. Only used for x >= 5; about 135/x levels reach full
// double precision there.
inline std::pair<double, double> mills_fraction_tail(double x) {
  double k_next = 0.0;
  double k2 = 0.0;
  const int levels = std::min(60, 8 + static_cast<int>(std::ceil(135.0 / x)));
  for (int k = levels; k >= 1; --k) {
    k_next = k / (x + k_next);
    if (k == 2) k2 = k_next;
  }
  return {k_next, k2};
}

inline constexpr double kMillsSwitch = -5.0;

}  // namespace detail

/// log Phi(t), accurate far into the lower tail.
inline double log_normal_cdf(double t) {
  if (t >= detail::kMillsSwitch) return std::log(normal_cdf(t));
  const double x = -t;
  const auto [k1, k2] = detail::mills_fraction_tail(x);
  (void)k2;
  return -0.5 * t * t - kLogSqrt2Pi - std::log(x + k1);
}

/// Moments of X ~ N(0,1) conditioned on X > -t:
///   mean = phi(t)/Phi(t), variance = 1 - mean * (t + mean).
/// `t_plus_mean` is returned separately because it is the stable building
/// block when t is very negative.
struct TruncatedMoments {
  double mean;
  double t_plus_mean;
  double variance;
};

inline TruncatedMoments truncated_normal_moments(double t) {
  if (t >= detail::kMillsSwitch) {
    const double lambda = normal_pdf(t) / normal_cdf(t);
    const double shifted = t + lambda;
    return {lambda, shifted, std::max(0.0, 1.0 - lambda * shifted)};
  }
  const double x = -t;
  const auto [k1, k2] = detail::mills_fraction_tail(x);
  return {x + k1, k1, k1 * (k2 - k1)};
}

/// log Phi(t) together with the truncated moments, sharing one cdf evaluation.
struct NormalCdfStats {
  double log_cdf;
  TruncatedMoments moments;
};

inline NormalCdfStats normal_cdf_stats(double t) {
  if (t >= detail::kMillsSwitch) {
    const double cdf = normal_cdf(t);
    const double lambda = normal_pdf(t) / cdf;
    const double shifted = t + lambda;
    return {std::log(cdf), {lambda, shifted, std::max(0.0, 1.0 - lambda * shifted)}};
  }
  const double x = -t;
  const auto [k1, k2] = detail::mills_fraction_tail(x);
  return {-0.5 * t * t - kLogSqrt2Pi - std::log(x + k1), {x + k1, k1, k1 * (k2 - k1)}};
}

// ---------------------------------------------------------------------------
// Quadrature rules
// ---------------------------------------------------------------------------

/// Nodes and weights such that sum_i w_i f(x_i) approximates an expectation.
/// For Gauss-Hermite rules the measure is N(0,1) (weights sum to one); for
/// half-range rules it is the standard normal density restricted to
/// [0, inf) (weights sum to one half).
struct QuadratureRule {
  std::vector<double> nodes;
  std::vector<double> weights;
  int order = 0;

  std::size_t size() const noexcept { return nodes.size(); }
};

namespace detail {

// Golub-Welsch: nodes/weights from the three-term recurrence of the
// orthogonal polynomials of a measure with total mass `mass`.
inline QuadratureRule golub_welsch(const Eigen::VectorXd& diag, const Eigen::VectorXd& offdiag_sq, double mass) {
  const auto n = diag.size();
  Eigen::VectorXd sub(n > 1 ? n - 1 : 0);
  for (Eigen::Index i = 0; i + 1 < n; ++i) sub(i) = std::sqrt(offdiag_sq(i));
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver;
  solver.computeFromTridiagonal(diag, sub, Eigen::ComputeEigenvectors);
  if (solver.info() != Eigen::Success) throw NumericDomainError("Golub-Welsch eigen-decomposition failed");
  QuadratureRule rule;
  rule.order = static_cast<int>(n);
  rule.nodes.resize(static_cast<std::size_t>(n));
  rule.weights.resize(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) {
    const double v0 = solver.eigenvectors()(0, i);
    rule.nodes[static_cast<std::size_t>(i)] = solver.eigenvalues()(i);
    rule.weights[static_cast<std::size_t>(i)] = mass * v0 * v0;
  }
  return rule;
}

inline QuadratureRule gauss_legendre_unit(int order) {
  Eigen::VectorXd diag = Eigen::VectorXd::Zero(order);
  Eigen::VectorXd off(order > 1 ? order - 1 : 0);
  for (int k = 1; k < order; ++k) off(k - 1) = double(k) * k / (4.0 * k * k - 1.0);
  auto rule = golub_welsch(diag, off, 2.0);
  // map [-1, 1] -> [0, 1]
  for (std::size_t i = 0; i < rule.size(); ++i) {
    rule.nodes[i] = 0.5 * (rule.nodes[i] + 1.0);
    rule.weights[i] *= 0.5;
  }
  return rule;
}

}  // namespace detail

/// Gauss-Hermite rule for the standard normal measure, exact for
/// polynomials of degree < 2 * order.
inline QuadratureRule gauss_hermite_rule(int order) {
  if (order < 2) throw InvalidArgument("gauss_hermite_rule: order must be >= 2, got " + std::to_string(order));
  Eigen::VectorXd diag = Eigen::VectorXd::Zero(order);
  Eigen::VectorXd off(order - 1);
  for (int k = 1; k < order; ++k) off(k - 1) = k;
  auto rule = detail::golub_welsch(diag, off, 1.0);
  // enforce exact symmetry and unit mass
  const std::size_t n = rule.size();
  double total = 0.0;
  for (std::size_t i = 0; i < n / 2; ++i) {
    const std::size_t j = n - 1 - i;
    const double x = 0.5 * (rule.nodes[j] - rule.nodes[i]);
    const double w = 0.5 * (rule.weights[i] + rule.weights[j]);
    rule.nodes[i] = -x;
    rule.nodes[j] = x;
    rule.weights[i] = rule.weights[j] = w;
  }
  if (n % 2 == 1) rule.nodes[n / 2] = 0.0;
  for (double w : rule.weights) total += w;
  for (double& w : rule.weights) w /= total;
  return rule;
}

/// Gauss rule for the measure phi(t) dt on [lower, inf). The recurrence is
/// obtained by a discretised Stieltjes procedure on a fine composite
/// Gauss-Legendre grid.
inline QuadratureRule half_gaussian_rule(int order, double lower = 0.0) {
  if (order < 1) throw InvalidArgument("half_gaussian_rule: order must be >= 1");
  if (!(lower >= 0.0 && lower < 10.0)) throw InvalidArgument("half_gaussian_rule: lower must lie in [0, 10)");
  constexpr double kSpan = 40.0;
  constexpr int kPanels = 400;
  const auto panel = detail::gauss_legendre_unit(16);
  std::vector<double> xs;
  std::vector<double> ws;
  xs.reserve(kPanels * panel.size());
  ws.reserve(kPanels * panel.size());
  const double h = kSpan / kPanels;
  for (int p = 0; p < kPanels; ++p) {
    for (std::size_t i = 0; i < panel.size(); ++i) {
      const double x = lower + (p + panel.nodes[i]) * h;
      xs.push_back(x);
      ws.push_back(panel.weights[i] * h * normal_pdf(x));
    }
  }
  const std::size_t m = xs.size();
  std::vector<double> prev(m, 0.0), cur(m), next(m);
  double mass = 0.0;
  for (double w : ws) mass += w;
  for (std::size_t i = 0; i < m; ++i) cur[i] = 1.0 / std::sqrt(mass);

  Eigen::VectorXd a(order), b(order > 1 ? order - 1 : 0);
  double beta_prev = 0.0;
  for (int k = 0; k < order; ++k) {
    double ak = 0.0;
    for (std::size_t i = 0; i < m; ++i) ak += ws[i] * xs[i] * cur[i] * cur[i];
    a(k) = ak;
    if (k + 1 == order) break;
    double norm = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
      next[i] = (xs[i] - ak) * cur[i] - beta_prev * prev[i];
      norm += ws[i] * next[i] * next[i];
    }
    const double beta = std::sqrt(norm);
    for (std::size_t i = 0; i < m; ++i) next[i] /= beta;
    b(k) = norm;
    beta_prev = beta;
    std::swap(prev, cur);
    std::swap(cur, next);
  }
  auto rule = detail::golub_welsch(a, b, mass);
  return rule;
}

/// Composite Gauss-Legendre rule for E over a standard normal, with panels
/// shrinking geometrically toward 0 down to width `scale`. Resolves integrands
/// that vary on a scale much finer than the Gaussian near the origin.
inline QuadratureRule zero_refined_gaussian_rule(double scale, int points_per_panel = 10, double half_width = 10.0) {
  if (!(scale > 0.0)) throw InvalidArgument("zero_refined_gaussian_rule: scale must be positive");
  const auto panel = detail::gauss_legendre_unit(points_per_panel);
  std::vector<double> breaks{0.0};
  double width = std::min(scale, 0.5);
  while (breaks.back() < half_width) {
    breaks.push_back(std::min(breaks.back() + width, half_width));
    width = std::min(2.0 * width, 0.5);
  }
  QuadratureRule rule;
  rule.order = static_cast<int>(2 * (breaks.size() - 1) * panel.size());
  std::vector<double> xs, ws;
  for (std::size_t p = 0; p + 1 < breaks.size(); ++p) {
    const double lo = breaks[p], hi = breaks[p + 1];
    for (std::size_t i = 0; i < panel.size(); ++i) {
      const double x = lo + (hi - lo) * panel.nodes[i];
      xs.push_back(x);
      ws.push_back((hi - lo) * panel.weights[i] * normal_pdf(x));
    }
  }
  double total = 0.0;
  for (double w : ws) total += 2.0 * w;
  for (std::size_t i = xs.size(); i-- > 0;) {
    rule.nodes.push_back(-xs[i]);
    rule.weights.push_back(ws[i] / total);
  }
  for (std::size_t i = 0; i < xs.size(); ++i) {
    rule.nodes.push_back(xs[i]);
    rule.weights.push_back(ws[i] / total);
  }
  return rule;
}

/// phi(t) dt on [0, c]: Gauss-Legendre panels doubling in width from
/// c 2^-levels over the first `refined` panels, then one panel (twice the
/// points) up to c.
inline QuadratureRule geometric_panel_rule(double c, int levels, int points_per_panel, int refined = 6) {
  if (!(c > 0.0) || levels < 0 || points_per_panel < 1 || refined < 1) {
    throw InvalidArgument("geometric_panel_rule: bad arguments");
  }
  const auto fine = detail::gauss_legendre_unit(points_per_panel);
  const auto closing = detail::gauss_legendre_unit(2 * points_per_panel);
  std::vector<double> breaks{0.0};
  for (int k = levels; k >= 1 && int(breaks.size()) <= refined; --k) breaks.push_back(c * std::ldexp(1.0, -k));
  breaks.push_back(c);
  QuadratureRule rule;
  for (std::size_t p = 0; p + 1 < breaks.size(); ++p) {
    const double lo = breaks[p], hi = breaks[p + 1];
    const auto& panel = p + 2 == breaks.size() && breaks.size() > 2 ? closing : fine;
    for (std::size_t i = 0; i < panel.size(); ++i) {
      const double x = lo + (hi - lo) * panel.nodes[i];
      rule.nodes.push_back(x);
      rule.weights.push_back((hi - lo) * panel.weights[i] * normal_pdf(x));
    }
  }
  rule.order = static_cast<int>(rule.nodes.size());
  return rule;
}

/// The rules used by the potentials. `gh` is the main Gauss-Hermite rule;
/// `inner` and `half` drive the three-dimensional integrals of the ReLU
/// layer, which split the hidden pre-activation at its kink.
struct Quadrature {
  QuadratureRule gh;
  QuadratureRule inner;
  QuadratureRule half;
  QuadratureRule composite;  // uniform panels of width 1/2, for integrands with nearby complex poles
  QuadratureRule half_tail;  // phi on [kKinkSplit, inf)
  int panel_points = 10;

  static constexpr double kKinkSplit = 0.5;

  /// phi on [0, kKinkSplit] with panels refined toward 0 down to about
  /// `fine` and kept geometric up to a few multiples of `coarse`.
  const QuadratureRule& kink_rule(double fine, double coarse) const {
    const auto level = [](double scale) {
      return scale >= kKinkSplit ? 0 : std::min(60, int(std::ceil(std::log2(kKinkSplit / scale))));
    };
    const int levels = level(std::min(fine, coarse));
    const int refined = levels - level(coarse) + 6;
    std::lock_guard lock(*kink_mutex);
    auto& slot = (*kink_cache)[{levels, refined}];
    if (!slot) slot = std::make_unique<QuadratureRule>(geometric_panel_rule(kKinkSplit, levels, panel_points, refined));
    return *slot;
  }

  std::shared_ptr<std::mutex> kink_mutex = std::make_shared<std::mutex>();
  std::shared_ptr<std::map<std::pair<int, int>, std::unique_ptr<QuadratureRule>>> kink_cache =
      std::make_shared<std::map<std::pair<int, int>, std::unique_ptr<QuadratureRule>>>();

  int order() const noexcept { return gh.order; }

  static Quadrature with_order(int order, int inner_order = 0, int half_order = 0) {
    if (order < 2) throw InvalidArgument("quadrature order must be >= 2, got " + std::to_string(order));
    if (inner_order <= 0) inner_order = std::max(16, order / 5);
    if (half_order <= 0) half_order = std::max(16, order / 4);
    const int panel_points = std::max(6, order / 10);
    Quadrature q;
    q.gh = gauss_hermite_rule(order);
    q.inner = gauss_hermite_rule(inner_order);
    q.half = half_gaussian_rule(half_order);
    q.composite = zero_refined_gaussian_rule(0.5, panel_points);
    q.half_tail = half_gaussian_rule(half_order, kKinkSplit);
    q.panel_points = panel_points;
    return q;
  }
};

inline constexpr int kDefaultQuadratureOrder = 100;

/// Shared, lazily built quadrature bundle for a given order.
inline const Quadrature& default_quadrature(int order = kDefaultQuadratureOrder) {
  static std::mutex mutex;
  static std::map<int, std::unique_ptr<Quadrature>> cache;
  std::lock_guard lock(mutex);
  auto& slot = cache[order];
  if (!slot) slot = std::make_unique<Quadrature>(Quadrature::with_order(order));
  return *slot;
}

// ---------------------------------------------------------------------------
// Gaussian expectations
// ---------------------------------------------------------------------------

template <class F>
  requires std::invocable<F&, double>
double expect_gaussian_1d(F&& f, const QuadratureRule& rule) {
  double acc = 0.0;
  for (std::size_t i = 0; i < rule.size(); ++i) {
    const double v = f(rule.nodes[i]);
    if (!std::isfinite(v)) throw NumericDomainError("non-finite integrand in expect_gaussian_1d", rule.nodes[i]);
    acc += rule.weights[i] * v;
  }
  return acc;
}

/// Expectation over two independent standard normals (tensor-product rule).
template <class F>
  requires std::invocable<F&, double, double>
double expect_gaussian_2d(F&& f, const QuadratureRule& rule) {
  double acc = 0.0;
  for (std::size_t i = 0; i < rule.size(); ++i) {
    double row = 0.0;
    for (std::size_t j = 0; j < rule.size(); ++j) {
      const double v = f(rule.nodes[i], rule.nodes[j]);
      if (!std::isfinite(v)) {
        throw NumericDomainError("non-finite integrand in expect_gaussian_2d at (" + std::to_string(rule.nodes[i]) +
                                     ", " + std::to_string(rule.nodes[j]) + ")",
                                 rule.nodes[i]);
      }
      row += rule.weights[j] * v;
    }
    acc += rule.weights[i] * row;
  }
  return acc;
}

// ---------------------------------------------------------------------------
// Counter-based random numbers
// ---------------------------------------------------------------------------

/// Philox4x32-10 (Salmon et al., SC'11). Stateless: output is a pure
/// function of (key, counter).
class Philox4x32 {
 public:
  using Block = std::array<std::uint32_t, 4>;

  explicit Philox4x32(std::uint64_t seed) noexcept
      : key_{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32)} {}

  Block operator()(Block ctr) const noexcept {
    std::array<std::uint32_t, 2> key = key_;
    for (int round = 0; round < 10; ++round) {
      if (round > 0) {
        key[0] += 0x9E3779B9u;
        key[1] += 0xBB67AE85u;
      }
      const std::uint64_t p0 = std::uint64_t{0xD2511F53u} * ctr[0];
      const std::uint64_t p1 = std::uint64_t{0xCD9E8D57u} * ctr[2];
      ctr = {static_cast<std::uint32_t>(p1 >> 32) ^ ctr[1] ^ key[0], static_cast<std::uint32_t>(p1),
             static_cast<std::uint32_t>(p0 >> 32) ^ ctr[3] ^ key[1], static_cast<std::uint32_t>(p0)};
    }
    return ctr;
  }

 private:
  std::array<std::uint32_t, 2> key_;
};

/// Standard normal draws addressed by (stream, index). Two draws per Philox
/// block via Box-Muller; identical on every platform.
class NormalStream {
 public:
  NormalStream(std::uint64_t seed, std::uint64_t stream) noexcept : gen_(seed), stream_(stream) {}

  double operator()(std::uint64_t index) const noexcept {
    const std::uint64_t block = index >> 1;
    const auto out = gen_({static_cast<std::uint32_t>(block), static_cast<std::uint32_t>(block >> 32),
                           static_cast<std::uint32_t>(stream_), static_cast<std::uint32_t>(stream_ >> 32)});
    const double u1 = to_unit_open(out[0], out[1]);
    const double u2 = to_unit_open(out[2], out[3]);
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * std::numbers::pi * u2;
    return (index & 1u) ? radius * std::sin(angle) : radius * std::cos(angle);
  }

  /// Uniform in (0, 1) addressed like the normal draws.
  double uniform(std::uint64_t index) const noexcept {
    const auto out = gen_({static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32),
                           static_cast<std::uint32_t>(stream_), static_cast<std::uint32_t>(~stream_ >> 32)});
    return to_unit_open(out[0], out[1]);
  }

 private:
  static double to_unit_open(std::uint32_t hi, std::uint32_t lo) noexcept {
    const std::uint64_t bits = (std::uint64_t{hi} << 21) ^ (lo >> 11);  // 53 bits
    return (static_cast<double>(bits & ((std::uint64_t{1} << 53) - 1)) + 0.5) * 0x1.0p-53;
  }

  Philox4x32 gen_;
  std::uint64_t stream_;
};

struct McEstimate {
  double mean = 0.0;
  double stderr_ = 0.0;
};

/// Monte Carlo estimate of E[f(xi)] (or E[f(xi, eta)] for two-argument f)
/// with xi, eta independent standard normals.
template <class F>
McEstimate mc_expect(F&& f, std::uint64_t n_samples, std::uint64_t seed) {
  if (n_samples < 1) throw InvalidArgument("mc_expect: n_samples must be >= 1");
  const NormalStream first(seed, 0);
  const NormalStream second(seed, 1);
  double mean = 0.0;
  double m2 = 0.0;
  for (std::uint64_t i = 0; i < n_samples; ++i) {
    double v;
    if constexpr (std::invocable<F&, double, double>) {
      v = f(first(i), second(i));
    } else {
      v = f(first(i));
    }
    if (!std::isfinite(v)) throw NumericDomainError("non-finite integrand in mc_expect", first(i));
    const double delta = v - mean;
    mean += delta / double(i + 1);
    m2 += delta * (v - mean);
  }
  const double var = n_samples > 1 ? m2 / double(n_samples - 1) : 0.0;
  return {mean, std::sqrt(var / double(n_samples))};
}

}  // namespace mlse
