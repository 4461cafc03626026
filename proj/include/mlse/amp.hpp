#pragma once

// Finite-size instances of the multi-layer model and multi-layer AMP on them.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "mlse/channels.hpp"
#include "mlse/errors.hpp"
#include "mlse/layers.hpp"
#include "mlse/network.hpp"
#include "mlse/numerics.hpp"
#include "mlse/state_evolution.hpp"

namespace mlse {

struct Instance {
  NetworkSpec spec;        // realized: betas and rho from the integer widths
  double alpha = 0.0;      // realized n / d
  std::vector<std::size_t> widths;  // k_1, ..., k_{L+1} = d
  std::size_t n = 0;
  Eigen::MatrixXd a;                    // n x d, variance 1/d
  std::vector<Eigen::MatrixXd> w;       // w[j]: k_{j+2} x k_{j+1}, variance 1/k_{j+1}
  std::vector<Eigen::VectorXd> h_star;  // h_star[0] = z_star, ..., h_star[L] = x_star
  Eigen::VectorXd y;
  std::uint64_t seed = 0;

  std::size_t d() const { return widths.back(); }
  const Eigen::VectorXd& z_star() const { return h_star.front(); }
  const Eigen::VectorXd& x_star() const { return h_star.back(); }
};

namespace detail {

// RNG streams of an instance
inline constexpr std::uint64_t kStreamLatent = 0;
inline constexpr std::uint64_t kStreamSupport = 1;
inline constexpr std::uint64_t kStreamMeasure = 2;
inline constexpr std::uint64_t kStreamWeights = 16;   // + layer index
inline constexpr std::uint64_t kStreamAmpInit = 256;  // + variable index

inline double apply_activation(LayerKind kind, double v) { return kind == LayerKind::Relu ? std::max(v, 0.0) : v; }

inline double apply_channel(ChannelKind kind, double v) { return kind == ChannelKind::Abs ? std::abs(v) : v; }

inline Eigen::MatrixXd gaussian_matrix(std::size_t rows, std::size_t cols, double scale, const NormalStream& s) {
  Eigen::MatrixXd m(rows, cols);
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) m(Eigen::Index(i), Eigen::Index(j)) = scale * s(i * cols + j);
  }
  return m;
}

inline std::size_t round_width(double v, const char* what) {
  const double r = std::round(v);
  if (!(r >= 1.0)) throw InvalidArgument(std::string("generate_instance: ") + what + " rounds to zero; increase d");
  return static_cast<std::size_t>(r);
}

}  // namespace detail

/// Draws a reproducible instance. Rows of the measurement matrix are indexed
/// independently of n, so instances at different alpha with the same seed
/// share the signal and the leading rows of A.
inline Instance generate_instance(const NetworkSpec& spec, double alpha, std::size_t d, std::uint64_t seed) {
  spec.validate();
  if (d < 1) throw InvalidArgument("generate_instance: d must be positive");
  if (!(alpha > 0.0) || !std::isfinite(alpha)) throw InvalidArgument("generate_instance: alpha must be positive");
  Instance inst;
  inst.seed = seed;
  const auto c = spec.widths();
  inst.widths.resize(c.size());
  for (std::size_t l = 0; l < c.size(); ++l) inst.widths[l] = detail::round_width(c[l] * double(d), "a layer width");
  inst.widths.back() = d;
  inst.n = detail::round_width(alpha * double(d), "n = alpha d");

  inst.spec = spec;
  for (std::size_t j = 0; j < spec.depth(); ++j) {
    inst.spec.layers[j].beta = double(inst.widths[j + 1]) / double(inst.widths[j]);
  }
  inst.spec.rho = double(inst.widths.front()) / double(d);
  inst.alpha = double(inst.n) / double(d);

  const NormalStream latent(seed, detail::kStreamLatent);
  const NormalStream support(seed, detail::kStreamSupport);
  Eigen::VectorXd z(Eigen::Index(inst.widths.front()));
  for (Eigen::Index i = 0; i < z.size(); ++i) {
    const bool on = spec.prior.kind == PriorKind::Gaussian || support.uniform(std::uint64_t(i)) < spec.prior.sparsity;
    z(i) = on ? latent(std::uint64_t(i)) : 0.0;
  }
  inst.h_star.push_back(std::move(z));
  for (std::size_t j = 0; j < spec.depth(); ++j) {
    const std::size_t in = inst.widths[j], out = inst.widths[j + 1];
    inst.w.push_back(detail::gaussian_matrix(out, in, 1.0 / std::sqrt(double(in)),
                                             NormalStream(seed, detail::kStreamWeights + j)));
    Eigen::VectorXd h = inst.w.back() * inst.h_star.back();
    for (auto& v : h) v = detail::apply_activation(spec.layers[j].kind, v);
    inst.h_star.push_back(std::move(h));
  }
  inst.a = detail::gaussian_matrix(inst.n, d, 1.0 / std::sqrt(double(d)), NormalStream(seed, detail::kStreamMeasure));
  inst.y = inst.a * inst.x_star();
  for (auto& v : inst.y) v = detail::apply_channel(spec.channel, v);
  return inst;
}

struct AmpOptions {
  double damping = 0.0;      // on means, variances and output messages
  double max_damping = 0.8;  // cap for adaptive damping; equal to damping disables it
  double tol = 1e-9;     // on the change of the per-coordinate MSE
  int max_iter = 500;
  bool onsager = true;
  double init_scale = 1e-2;  // std of the random initial means, relative to sqrt(second moment)
};

struct AmpTrace {
  std::vector<double> mse_per_iter;  // entry 0 is the initialization
  bool converged = false;
  int iterations = 0;
  double final_damping = 0.0;
  std::string failure;  // set when the run blew up
  Eigen::VectorXd x_hat;

  double final_mse() const {
    return mse_per_iter.empty() ? std::numeric_limits<double>::quiet_NaN() : mse_per_iter.back();
  }
};

/// Per-coordinate squared error; for the Abs channel the global sign of x is
/// not identifiable and the better of the two signs is used.
inline double signal_mse(ChannelKind channel, const Eigen::VectorXd& x_hat, const Eigen::VectorXd& x_star) {
  const double d = double(x_star.size());
  const double plus = (x_hat - x_star).squaredNorm() / d;
  if (channel != ChannelKind::Abs) return plus;
  return std::min(plus, (x_hat + x_star).squaredNorm() / d);
}

/// Multi-layer AMP. Each iteration sweeps from the measurements down to the
/// latent: channel output step, then for every layer the joint (x, z)
/// posterior of that layer with the message from above, then the latent
/// prior. Variances are kept uniform across coordinates.
inline AmpTrace amp_run(const Instance& inst, const AmpOptions& opt = {}) {
  const NetworkSpec& spec = inst.spec;
  const std::size_t depth = spec.depth();
  if (inst.w.size() != depth || inst.h_star.size() != depth + 1 || inst.widths.size() != depth + 1) {
    throw InvalidArgument("amp_run: instance is inconsistent with its spec");
  }
  if (!(opt.damping >= 0.0 && opt.damping < 1.0)) throw InvalidArgument("amp_run: damping must lie in [0, 1)");
  if (!(opt.max_damping >= 0.0 && opt.max_damping < 1.0)) {
    throw InvalidArgument("amp_run: max_damping must lie in [0, 1)");
  }
  if (!(opt.tol > 0.0) || opt.max_iter < 1) throw InvalidArgument("amp_run: need tol > 0 and max_iter >= 1");

  const auto moments = spec.second_moments();
  const std::size_t nvar = depth + 1;
  // estimates of h_1 .. h_{L+1}
  std::vector<Eigen::VectorXd> mean(nvar);
  std::vector<double> var(nvar);
  for (std::size_t l = 0; l < nvar; ++l) {
    const NormalStream s(inst.seed, detail::kStreamAmpInit + l);
    mean[l].resize(Eigen::Index(inst.widths[l]));
    const double scale = opt.init_scale * std::sqrt(moments[l]);
    for (Eigen::Index i = 0; i < mean[l].size(); ++i) mean[l](i) = scale * s(std::uint64_t(i));
    var[l] = moments[l];
  }
  // mixing m = 0..L-1 is layer m (input h_{m+1}); m = L is the measurement
  const auto matrix = [&](std::size_t m) -> const Eigen::MatrixXd& { return m == depth ? inst.a : inst.w[m]; };
  std::vector<Eigen::VectorXd> g_prev(nvar);
  for (std::size_t m = 0; m < nvar; ++m) g_prev[m] = Eigen::VectorXd::Zero(matrix(m).rows());

  AmpTrace trace;
  double gamma = opt.damping;
  // ground-truth free overlap estimate |x_hat|^2 / d; oscillation or blow-up raises the damping
  const double rho_x = moments.back();
  double q_est = mean.back().squaredNorm() / double(inst.d());
  double prev_step = 0.0;
  int flips = 0;
  trace.mse_per_iter.push_back(signal_mse(spec.channel, mean.back(), inst.x_star()));

  const auto finite = [](const Eigen::VectorXd& v) { return v.allFinite(); };

  for (int it = 1; it <= opt.max_iter; ++it) {
    // Forward fields from the current estimates.
    std::vector<Eigen::VectorXd> omega(nvar);
    std::vector<double> v_field(nvar);
    for (std::size_t m = 0; m < nvar; ++m) {
      v_field[m] = std::max(var[m], kVarianceFloor);
      omega[m] = matrix(m) * mean[m];
      if (opt.onsager) omega[m] -= v_field[m] * g_prev[m];
    }

    std::vector<Eigen::VectorXd> new_mean(nvar);
    std::vector<double> new_var(nvar);

    // Measurement step.
    const Eigen::Index n = inst.a.rows();
    Eigen::VectorXd g(n);
    double dg_sum = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      const auto out = channel_output(spec.channel, {omega[depth](i), v_field[depth], inst.y(i)});
      g(i) = out.g;
      dg_sum += out.dg;
    }
    if (it > 1) g = (1.0 - gamma) * g + gamma * g_prev[depth];
    g_prev[depth] = g;
    double prec = std::max(0.0, -dg_sum / double(inst.d()));  // A for h_{L+1}
    Eigen::VectorXd field = inst.a.transpose() * g;          // B for h_{L+1}
    if (opt.onsager) field += prec * mean[depth];

    // Layers, top to bottom.
    for (std::size_t j = depth; j-- > 0;) {
      const std::size_t out_var = j + 1;
      const Eigen::Index k_out = Eigen::Index(inst.widths[out_var]);
      Eigen::VectorXd gl(k_out), mx(k_out);
      double vx = 0.0, dgl = 0.0;
      for (Eigen::Index i = 0; i < k_out; ++i) {
        const auto post = layer_posterior(spec.layers[j].kind, {field(i), prec, omega[j](i), v_field[j]});
        mx(i) = post.mean_x;
        vx += post.var_x;
        gl(i) = (post.mean_z - omega[j](i)) / v_field[j];
        dgl += (post.var_z - v_field[j]) / (v_field[j] * v_field[j]);
      }
      new_mean[out_var] = std::move(mx);
      new_var[out_var] = vx / double(k_out);
      if (it > 1) gl = (1.0 - gamma) * gl + gamma * g_prev[j];
      g_prev[j] = gl;
      const double k_in = double(inst.widths[j]);
      prec = std::max(0.0, -dgl / k_in);
      field = inst.w[j].transpose() * gl;
      if (opt.onsager) field += prec * mean[j];
    }

    // Latent prior.
    {
      const Eigen::Index k = Eigen::Index(inst.widths.front());
      Eigen::VectorXd mz(k);
      double vz = 0.0;
      for (Eigen::Index i = 0; i < k; ++i) {
        const auto post = prior_posterior(spec.prior, field(i), prec);
        mz(i) = post.mean;
        vz += post.var;
      }
      new_mean[0] = std::move(mz);
      new_var[0] = vz / double(k);
    }

    bool ok = true;
    for (std::size_t l = 0; l < nvar; ++l) {
      mean[l] = (1.0 - gamma) * new_mean[l] + gamma * mean[l];
      var[l] = (1.0 - gamma) * new_var[l] + gamma * var[l];
      ok = ok && finite(mean[l]) && std::isfinite(var[l]);
    }
    trace.iterations = it;
    if (!ok) {
      trace.failure = "non-finite estimate at iteration " + std::to_string(it);
      break;
    }
    const double q_new = mean.back().squaredNorm() / double(inst.d());
    const double step = q_new - q_est;
    if (gamma < opt.max_damping) {
      const bool oscillating = it > 2 && step * prev_step < 0.0 && std::abs(step) > 1e-6 * rho_x;
      if (q_new > 4.0 * rho_x || (oscillating && ++flips >= 2)) {
        gamma = std::min(opt.max_damping, std::max(0.3, gamma + 0.2));
        flips = 0;
      } else if (!oscillating) {
        flips = 0;
      }
    }
    prev_step = step;
    q_est = q_new;

    const double mse = signal_mse(spec.channel, mean.back(), inst.x_star());
    const double change = std::abs(mse - trace.mse_per_iter.back());
    trace.mse_per_iter.push_back(mse);
    if (change < opt.tol) {
      trace.converged = true;
      break;
    }
  }
  trace.final_damping = gamma;
  trace.x_hat = mean.back();
  return trace;
}

struct AmpSeRow {
  double alpha = 0.0;
  double mse_amp_mean = std::numeric_limits<double>::quiet_NaN();
  double mse_amp_stderr = std::numeric_limits<double>::quiet_NaN();
  double mse_se = std::numeric_limits<double>::quiet_NaN();
  int samples_ok = 0;
  int samples_failed = 0;
  std::vector<std::string> failures;
};

struct CompareOptions {
  AmpOptions amp;
  SolverOptions se;
  std::uint64_t seed_base = 0;
};

/// Final AMP MSE averaged over seeded instances next to the SE prediction
/// from an uninformative start, both at the realized dimensions.
inline std::vector<AmpSeRow> compare_amp_se(const NetworkSpec& spec, std::size_t d, int n_samples,
                                            const std::vector<double>& alpha_grid, const CompareOptions& opt = {},
                                            const Quadrature& quad = default_quadrature()) {
  spec.validate();
  if (n_samples < 1) throw InvalidArgument("compare_amp_se: n_samples must be positive");
  if (alpha_grid.empty()) throw InvalidArgument("compare_amp_se: alpha grid is empty");
  std::vector<AmpSeRow> rows;
  for (double alpha : alpha_grid) {
    AmpSeRow row;
    row.alpha = alpha;
    std::vector<double> finals;
    NetworkSpec realized;
    double realized_alpha = alpha;
    for (int s = 0; s < n_samples; ++s) {
      try {
        const Instance inst = generate_instance(spec, alpha, d, opt.seed_base + std::uint64_t(s));
        realized = inst.spec;
        realized_alpha = inst.alpha;
        const AmpTrace tr = amp_run(inst, opt.amp);
        if (!tr.failure.empty()) throw NumericDomainError(tr.failure);
        finals.push_back(tr.final_mse());
        ++row.samples_ok;
      } catch (const std::exception& e) {
        ++row.samples_failed;
        row.failures.push_back("seed " + std::to_string(opt.seed_base + std::uint64_t(s)) + ": " + e.what());
      }
    }
    if (!finals.empty()) {
      double m = 0.0;
      for (double f : finals) m += f;
      m /= double(finals.size());
      double ss = 0.0;
      for (double f : finals) ss += (f - m) * (f - m);
      row.mse_amp_mean = m;
      // undefined (NaN) from a single sample
      if (finals.size() > 1) row.mse_amp_stderr = std::sqrt(ss / double(finals.size() - 1) / double(finals.size()));
      row.mse_se = se_solve(realized, realized_alpha, InitKind::Uninformative, opt.se, quad).mmse;
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace mlse
