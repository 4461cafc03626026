#pragma once

// Network description: channel, generative layer stack, latent prior and
// compression rho = k / d.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "mlse/channels.hpp"
#include "mlse/errors.hpp"
#include "mlse/layers.hpp"

namespace mlse {

/// One generative layer mapping h_l (width k_l) to h_{l+1} (width k_{l+1}),
/// with aspect ratio beta = k_{l+1} / k_l.
struct LayerSpec {
  LayerKind kind = LayerKind::LinearPass;
  double beta = 1.0;
  bool operator==(const LayerSpec&) const = default;
};

inline constexpr double kSpecProductTolerance = 1e-10;

struct NetworkSpec {
  ChannelKind channel = ChannelKind::Abs;
  std::vector<LayerSpec> layers;  // from the latent side (l = 1) to the signal side (l = L)
  LatentPrior prior = LatentPrior::gaussian();
  double rho = 1.0;

  bool operator==(const NetworkSpec&) const = default;

  std::size_t depth() const noexcept { return layers.size(); }

  std::vector<LayerKind> kinds() const {
    std::vector<LayerKind> out;
    for (const auto& l : layers) out.push_back(l.kind);
    return out;
  }

  std::vector<double> betas() const {
    std::vector<double> out;
    for (const auto& l : layers) out.push_back(l.beta);
    return out;
  }

  /// Throws InvalidArgument naming the offending field.
  void validate() const {
    if (!(rho > 0.0) || !std::isfinite(rho)) throw InvalidArgument("rho: must be a positive finite number");
    if (prior.kind == PriorKind::Gaussian && prior.sparsity != 1.0) {
      throw InvalidArgument("prior.sparsity: Gaussian prior has sparsity 1");
    }
    if (!(prior.sparsity > 0.0 && prior.sparsity <= 1.0)) throw InvalidArgument("prior.sparsity: must lie in (0, 1]");
    double product = 1.0;
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const double b = layers[l].beta;
      if (!(b > 0.0) || !std::isfinite(b)) {
        throw InvalidArgument("layers[" + std::to_string(l) + "].beta: must be a positive finite number");
      }
      product /= b;
    }
    if (std::abs(product - rho) > kSpecProductTolerance * std::max(1.0, rho)) {
      std::ostringstream msg;
      msg.precision(12);
      msg << "layers: product of 1/beta is " << product << " but rho is " << rho;
      throw InvalidArgument(msg.str());
    }
  }

  /// [rho_1 = rho_z, ..., rho_{L+1} = rho_x].
  std::vector<double> second_moments() const { return second_moment_propagate(kinds(), prior.second_moment()); }

  double rho_x() const { return second_moments().back(); }

  /// Relative widths c_l = k_l / d for l = 1..L+1 (c_{L+1} = 1).
  std::vector<double> widths() const {
    std::vector<double> c(layers.size() + 1, 1.0);
    for (std::size_t l = layers.size(); l-- > 0;) c[l] = c[l + 1] / layers[l].beta;
    return c;
  }

  bool all_layers(LayerKind kind) const {
    return std::all_of(layers.begin(), layers.end(), [&](const LayerSpec& l) { return l.kind == kind; });
  }

  /// Builds a spec whose last aspect ratio is fixed by rho and the others.
  static NetworkSpec with_auto_last_beta(ChannelKind channel, const std::vector<LayerKind>& kinds,
                                         const std::vector<double>& leading_betas, double rho,
                                         LatentPrior prior = LatentPrior::gaussian()) {
    NetworkSpec spec;
    spec.channel = channel;
    spec.prior = prior;
    spec.rho = rho;
    if (kinds.empty()) {
      if (!leading_betas.empty()) throw InvalidArgument("layers: betas given for an empty layer stack");
    } else {
      if (leading_betas.size() + 1 != kinds.size()) {
        throw InvalidArgument("layers: need exactly " + std::to_string(kinds.size() - 1) + " leading betas");
      }
      double product = 1.0;
      for (std::size_t l = 0; l < leading_betas.size(); ++l) {
        spec.layers.push_back({kinds[l], leading_betas[l]});
        product *= leading_betas[l];
      }
      spec.layers.push_back({kinds.back(), 1.0 / (rho * product)});
    }
    spec.validate();
    return spec;
  }
};

/// Whether the all-zero overlap is a fixed point: even channel, zero-mean
/// latent prior and every layer output unbiased at zero field.
inline bool uninformative_fixed_point_exists(const NetworkSpec& spec) {
  if (spec.channel == ChannelKind::Linear) return false;
  // Both latent priors are centred; ReLU biases E[x] under Q_out^0.
  return spec.all_layers(LayerKind::LinearPass);
}

inline std::string describe(const NetworkSpec& spec) {
  std::ostringstream out;
  out.precision(6);
  out << to_string(spec.channel) << " rho=" << spec.rho << " layers=[";
  for (std::size_t l = 0; l < spec.layers.size(); ++l) {
    out << (l ? ", " : "") << to_string(spec.layers[l].kind) << ":" << spec.layers[l].beta;
  }
  out << "] prior=" << (spec.prior.kind == PriorKind::Gaussian ? "gaussian" : "gauss-bernoulli");
  if (spec.prior.kind == PriorKind::GaussBernoulli) out << "(" << spec.prior.sparsity << ")";
  return out.str();
}

}  // namespace mlse
