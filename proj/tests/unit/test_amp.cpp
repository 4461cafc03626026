#include <gtest/gtest.h>

#include <cmath>

#include "mlse/amp.hpp"

using namespace mlse;

namespace {

NetworkSpec spec_of(ChannelKind ch, LayerKind kind, double rho) {
  return NetworkSpec::with_auto_last_beta(ch, {kind}, {}, rho);
}

}  // namespace

TEST(Instance, ReproducibleAndShaped) {
  const auto spec = spec_of(ChannelKind::Abs, LayerKind::LinearPass, 0.5);
  const auto a = generate_instance(spec, 1.2, 300, 9);
  const auto b = generate_instance(spec, 1.2, 300, 9);
  const auto c = generate_instance(spec, 1.2, 300, 10);
  EXPECT_EQ(a.n, 360u);
  EXPECT_EQ(a.widths.front(), 150u);
  EXPECT_EQ(a.a.rows(), 360);
  EXPECT_EQ(a.w[0].rows(), 300);
  EXPECT_EQ(a.w[0].cols(), 150);
  EXPECT_EQ(a.y, b.y);
  EXPECT_NE(a.y, c.y);
  for (Eigen::Index i = 0; i < a.y.size(); ++i) EXPECT_GE(a.y(i), 0.0);
  // The same seed at a larger alpha only appends rows.
  const auto more = generate_instance(spec, 1.5, 300, 9);
  EXPECT_EQ(more.a.topRows(360), a.a);
  EXPECT_EQ(more.x_star(), a.x_star());
}

TEST(Instance, ReluSignalStatistics) {
  const auto spec = spec_of(ChannelKind::Linear, LayerKind::Relu, 1.0);
  const auto inst = generate_instance(spec, 1.0, 4000, 3);
  const auto& x = inst.x_star();
  const double zeros = double((x.array() == 0.0).count()) / double(x.size());
  EXPECT_NEAR(zeros, 0.5, 0.03);
  // Var of relu(z) for unit-variance z is 1/2 - 1/(2 pi); second moment 1/2.
  EXPECT_NEAR(x.squaredNorm() / double(x.size()), 0.5, 0.035);
  const auto lin = generate_instance(spec_of(ChannelKind::Linear, LayerKind::LinearPass, 1.0), 1.0, 4000, 3);
  const double m = lin.x_star().mean();
  EXPECT_NEAR((lin.x_star().array() - m).square().mean(), 1.0, 0.07);
}

TEST(Instance, RejectsBadArguments) {
  const auto spec = spec_of(ChannelKind::Abs, LayerKind::LinearPass, 0.5);
  EXPECT_THROW(generate_instance(spec, 0.0, 100, 1), InvalidArgument);
  EXPECT_THROW(generate_instance(spec, 1.0, 0, 1), InvalidArgument);
  EXPECT_THROW(generate_instance(spec_of(ChannelKind::Abs, LayerKind::LinearPass, 1e-3), 1.0, 100, 1),
               InvalidArgument);
}

TEST(Amp, DeterministicForFixedSeed) {
  const auto spec = spec_of(ChannelKind::Abs, LayerKind::LinearPass, 0.5);
  const auto inst = generate_instance(spec, 1.0, 400, 2);
  AmpOptions opt;
  opt.max_iter = 60;
  const auto a = amp_run(inst, opt);
  const auto b = amp_run(inst, opt);
  EXPECT_EQ(a.mse_per_iter, b.mse_per_iter);
  EXPECT_EQ(a.x_hat, b.x_hat);
}

TEST(Amp, LinearChannelRecoversAboveOneMeasurementPerUnknown) {
  const auto spec = spec_of(ChannelKind::Linear, LayerKind::LinearPass, 1.0);
  const auto inst = generate_instance(spec, 1.2, 1000, 4);
  const auto tr = amp_run(inst, AmpOptions{});
  EXPECT_TRUE(tr.failure.empty()) << tr.failure;
  EXPECT_LT(tr.final_mse(), 1e-6);
}

TEST(Amp, OnsagerTermIsNeeded) {
  const auto spec = spec_of(ChannelKind::Linear, LayerKind::LinearPass, 1.0);
  const auto inst = generate_instance(spec, 1.2, 1000, 4);
  AmpOptions off;
  off.onsager = false;
  const auto with = amp_run(inst, AmpOptions{});
  const auto without = amp_run(inst, off);
  EXPECT_LT(with.final_mse(), 1e-6);
  EXPECT_GT(without.final_mse(), 0.1);
}

// Undamped AMP on this instance stalls near mse 1e-3 and then blows up.
TEST(Amp, AdaptiveDampingRescuesUnstableRun) {
  const auto spec = spec_of(ChannelKind::Abs, LayerKind::Relu, 2.0);
  const auto inst = generate_instance(spec, 0.8, 2000, 9);
  AmpOptions fixed;
  fixed.max_damping = 0.0;
  const auto plain = amp_run(inst, fixed);
  EXPECT_EQ(plain.final_damping, 0.0);
  EXPECT_FALSE(plain.converged);
  EXPECT_GT(plain.final_mse(), 0.1);

  const auto adaptive = amp_run(inst, AmpOptions{});
  EXPECT_TRUE(adaptive.converged);
  EXPECT_GT(adaptive.final_damping, 0.0);
  EXPECT_LT(adaptive.final_mse(), 1e-6);
}

TEST(Amp, RejectsBadDamping) {
  const auto spec = spec_of(ChannelKind::Linear, LayerKind::LinearPass, 1.0);
  const auto inst = generate_instance(spec, 1.2, 50, 1);
  AmpOptions opt;
  opt.max_damping = 1.0;
  EXPECT_THROW(amp_run(inst, opt), InvalidArgument);
  opt.max_damping = 0.8;
  opt.damping = -0.1;
  EXPECT_THROW(amp_run(inst, opt), InvalidArgument);
}

TEST(Amp, SignInvariantErrorForAbs) {
  Eigen::VectorXd x(3), xh(3);
  x << 1, -2, 3;
  xh = -x;
  EXPECT_EQ(signal_mse(ChannelKind::Abs, xh, x), 0.0);
  EXPECT_NEAR(signal_mse(ChannelKind::Linear, xh, x), 4.0 * 14.0 / 3.0, 1e-12);
}

TEST(Amp, FollowsStateEvolutionOnModerateInstance) {
  const auto spec = spec_of(ChannelKind::Linear, LayerKind::Relu, 1.0);
  CompareOptions opt;
  opt.se.compute_free_energy = false;
  const auto rows = compare_amp_se(spec, 800, 2, {0.3}, opt, default_quadrature(40));
  ASSERT_EQ(rows.size(), 1u);
  EXPECT_EQ(rows[0].samples_ok, 2);
  EXPECT_NEAR(rows[0].mse_amp_mean, rows[0].mse_se, 0.05);
}

TEST(Amp, AbsLinearEndpoints) {
  const auto spec = spec_of(ChannelKind::Abs, LayerKind::LinearPass, 2.0);
  const double rho_x = spec.rho_x();
  const std::size_t d = 1000;
  const auto high = amp_run(generate_instance(spec, 1.3, d, 3));
  EXPECT_TRUE(high.failure.empty()) << high.failure;
  EXPECT_LT(high.final_mse(), 1e-3);
  EXPECT_LE(high.mse_per_iter.front(), rho_x * (1.0 + 5.0 / std::sqrt(double(d))));
  const auto low = amp_run(generate_instance(spec, 0.2, d, 3));
  EXPECT_NEAR(low.final_mse(), rho_x, 0.1);
}

TEST(Amp, TrajectoryTracksStateEvolution) {
  // no zero fixed point, so the trajectory does not hinge on the initial overlap
  const auto spec = spec_of(ChannelKind::Linear, LayerKind::Relu, 1.0);
  const Quadrature& quad = default_quadrature(40);
  for (double alpha : {0.3, 0.6, 1.2}) {
    const auto inst = generate_instance(spec, alpha, 2000, 21);
    AmpOptions opt;
    opt.max_iter = 15;
    const auto tr = amp_run(inst, opt);
    ASSERT_TRUE(tr.failure.empty()) << tr.failure;
    SolverOptions init;
    init.epsilon = 1e-4 * inst.spec.rho_x();
    auto st = initial_state(inst.spec, InitKind::Uninformative, init);
    for (std::size_t t = 1; t < tr.mse_per_iter.size(); ++t) {
      st = se_step(inst.spec, inst.alpha, st, quad);
      EXPECT_NEAR(tr.mse_per_iter[t], inst.spec.rho_x() - st.q_x, 0.1) << "alpha " << alpha << " iteration " << t;
    }
  }
}
