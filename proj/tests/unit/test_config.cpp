#include <gtest/gtest.h>

#include "mlse/config.hpp"

using namespace mlse;

namespace {

std::string field_of(const std::string& text) {
  try {
    parse_config_text(text);
  } catch (const ConfigError& e) {
    return e.field();
  }
  return "<no error>";
}

}  // namespace

TEST(Config, MinimalDefaults) {
  const auto c = parse_config_text(R"({"channel": "abs", "layers": [{"kind": "relu", "beta": "auto"}], "rho": 0.5})");
    EXPECT_EQ(c.quad_order, kDefaultQuadratureOrder);
  const auto spec = c.spec();
  ASSERT_EQ(spec.depth(), 1u);
  EXPECT_DOUBLE_EQ(spec.layers[0].beta, 2.0);
  EXPECT_EQ(spec.layers[0].kind, LayerKind::Relu);
}

TEST(Config, RoundTripThroughJson) {
  const auto c = parse_config_text(R"({
    "channel": "linear",
    "layers": [{"kind": "linear", "beta": 2.0}, {"kind": "relu", "beta": "auto"}],
    "prior": {"kind": "gauss-bernoulli", "sparsity": 0.4},
    "rho_grid": {"from": 0.25, "to": 1.0, "count": 4},
    "alpha_grid": [0.5, 1.5],
    "init": "informed", "resolution": 1e-4, "jobs": 3, "seed": 17, "quad_order": 64,
    "d": 500, "n_samples": 3,
    "solver": {"tol": 1e-12, "max_iter": 100},
    "amp": {"damping": 0.2, "onsager": false}
  })");
  EXPECT_EQ(c.rho_grid.size(), 4u);
  EXPECT_DOUBLE_EQ(c.rho_grid[3], 1.0);
  EXPECT_EQ(c.prior.kind, PriorKind::GaussBernoulli);
  EXPECT_EQ(c.solver.max_iter, 100);
  EXPECT_FALSE(c.amp.onsager);
  const auto again = parse_config(to_json(c));
  EXPECT_EQ(again, c);
  EXPECT_DOUBLE_EQ(c.spec_at(0.5).layers[1].beta, 1.0);
}

TEST(Config, ErrorsNameTheField) {
  EXPECT_EQ(field_of(R"({"chanel": "abs"})"), "chanel");
  EXPECT_EQ(field_of(R"({"layers": []})"), "channel");
  EXPECT_EQ(field_of(R"({"channel": "square"})"), "channel");
  EXPECT_EQ(field_of(R"({"channel": "abs", "solver": {"tolerance": 1}})"), "solver.tolerance");
  EXPECT_EQ(field_of(R"({"channel": "abs", "resolution": -1})"), "resolution");
  EXPECT_EQ(field_of(R"({"channel": "abs", "quad_order": 2.5})"), "quad_order");
  EXPECT_EQ(field_of(R"({"channel": "abs", "rho_grid": [0.5, "x"]})"), "rho_grid[1]");
  EXPECT_EQ(field_of(R"({"channel": "abs", "layers": [{"kind": "linear", "beta": 3.0}], "rho": 2.0})"), "layers");
  EXPECT_EQ(field_of(R"({"channel": "abs", "layers": [{"kind": "linear", "beta": "auto"},
                                                     {"kind": "linear", "beta": 1}]})"),
            "layers[0].beta");
  EXPECT_EQ(field_of(R"({"channel": "abs", "amp": {"damping": 1.5}})"), "amp.damping");
  EXPECT_EQ(field_of(R"({"channel": "abs", "amp": {"max_damping": 1.0}})"), "amp.max_damping");
  EXPECT_EQ(field_of("{not json"), "<file>");
  EXPECT_THROW(load_config("/nonexistent/config.json"), ConfigError);
}

TEST(Config, SpecNeedsRho) {
  const auto c = parse_config_text(R"({"channel": "linear", "layers": [{"kind": "linear", "beta": "auto"}]})");
  EXPECT_THROW(c.spec(), ConfigError);
}
