#include <gtest/gtest.h>

#include <cmath>

#include "clmr/error.hpp"
#include "clmr/optim.hpp"
#include "oracles.hpp"

using namespace clmr;

namespace {

oracle::Rule rule_of(OptimizerKind k) {
  switch (k) {
    case OptimizerKind::Sgd: return oracle::Rule::Sgd;
    case OptimizerKind::Momentum: return oracle::Rule::Momentum;
    case OptimizerKind::Nesterov: return oracle::Rule::Nesterov;
    case OptimizerKind::AdaGrad: return oracle::Rule::AdaGrad;
    case OptimizerKind::Adam: return oracle::Rule::Adam;
    case OptimizerKind::Clr: return oracle::Rule::Clr;
    case OptimizerKind::Clmr: return oracle::Rule::Clmr;
  }
  return oracle::Rule::Sgd;
}

// Runs the library optimizer on f(x) = lambda/2 x^2 through prepare/apply.
std::vector<double> run_library(OptimizerKind kind, const oracle::ScalarSetup& s, int steps) {
  HyperParams hp;
  hp.alpha = s.alpha;
  hp.beta = s.beta;
  hp.beta1 = s.beta1;
  hp.beta2 = s.beta2;
  hp.epsilon = s.eps;
  CycleConfig cyc;
  cyc.min_lr = s.min_lr;
  cyc.max_lr = s.max_lr;
  cyc.min_mr = s.min_mr;
  cyc.max_mr = s.max_mr;
  cyc.c_lr = s.c_lr;
  cyc.c_mr = s.c_mr;
  cyc.it_per_epoch = s.it;
  std::optional<CycleConfig> c;
  if (kind == OptimizerKind::Clr || kind == OptimizerKind::Clmr) c = cyc;
  Optimizer opt(kind, hp, c, {1});
  std::vector<double> x{s.x0}, g{0.0};
  std::vector<std::span<double>> params{std::span<double>(x)};
  std::vector<std::span<const double>> grads{std::span<const double>(g)};
  std::vector<double> out;
  for (int i = 0; i < steps; ++i) {
    opt.prepare(params, i);
    g[0] = s.lambda * x[0];
    opt.apply(params, grads, i);
    out.push_back(x[0]);
  }
  return out;
}

const OptimizerKind kAll[] = {OptimizerKind::Sgd,     OptimizerKind::Momentum, OptimizerKind::Nesterov,
                              OptimizerKind::AdaGrad, OptimizerKind::Adam,     OptimizerKind::Clr,
                              OptimizerKind::Clmr};

}  // namespace

TEST(Optim, ParseAndPrint) {
  for (auto k : kAll) EXPECT_EQ(parse_optimizer_kind(to_string(k)), k);
  EXPECT_THROW(parse_optimizer_kind("rmsprop"), ConfigError);
  EXPECT_TRUE(uses_lookahead(OptimizerKind::Nesterov));
  EXPECT_TRUE(uses_lookahead(OptimizerKind::Clmr));
  EXPECT_FALSE(uses_lookahead(OptimizerKind::Momentum));
}

TEST(Optim, TrajectoriesMatchScalarSimulator) {
  for (double lambda : {0.5, 2.0, 10.0}) {
    oracle::ScalarSetup s;
    s.lambda = lambda;
    s.x0 = -1.7;
    for (auto k : kAll) {
      const auto lib = run_library(k, s, 50);
      const auto ref = oracle::simulate(rule_of(k), s, 50);
      for (int i = 0; i < 50; ++i) {
        ASSERT_NEAR(lib[i], ref[i], 1e-12) << to_string(k) << " lambda=" << lambda << " step " << i;
      }
    }
  }
}

TEST(Optim, SgdClosedForm) {
  for (double alpha : {0.25, 0.75}) {
    oracle::ScalarSetup s;
    s.lambda = 2.0;
    s.alpha = alpha;
    const auto xs = run_library(OptimizerKind::Sgd, s, 50);
    for (int i = 0; i < 50; ++i) EXPECT_EQ(std::abs(xs[i]), std::pow(std::abs(1 - alpha * 2.0), i + 1));
  }
}

TEST(Optim, SgdDivergesAboveStabilityLimit) {
  oracle::ScalarSetup s;
  s.lambda = 1.0;
  s.alpha = 2.5;
  const auto xs = run_library(OptimizerKind::Sgd, s, 20);
  EXPECT_GT(std::abs(xs.back()), 1e3);
}

TEST(Optim, ZeroMomentumEqualsSgd) {
  oracle::ScalarSetup s;
  s.beta = 0.0;
  const auto a = run_library(OptimizerKind::Momentum, s, 30);
  const auto b = run_library(OptimizerKind::Nesterov, s, 30);
  const auto c = run_library(OptimizerKind::Sgd, s, 30);
  for (int i = 0; i < 30; ++i) {
    EXPECT_DOUBLE_EQ(a[i], c[i]);
    EXPECT_DOUBLE_EQ(b[i], c[i]);
  }
}

TEST(Optim, ClmrWithFlatWavesEqualsNesterov) {
  oracle::ScalarSetup s;
  s.min_lr = s.max_lr = s.alpha;
  s.min_mr = s.max_mr = s.beta;
  const auto a = run_library(OptimizerKind::Clmr, s, 40);
  const auto b = run_library(OptimizerKind::Nesterov, s, 40);
  for (int i = 0; i < 40; ++i) EXPECT_NEAR(a[i], b[i], 1e-15);
}

TEST(Optim, RatesFollowSchedule) {
  CycleConfig cyc;
  cyc.c_lr = 2;
  cyc.c_mr = 6;
  cyc.it_per_epoch = 5;
  HyperParams hp;
  Optimizer clmr(OptimizerKind::Clmr, hp, cyc, {3});
  Optimizer clr(OptimizerKind::Clr, hp, cyc, {3});
  Optimizer nest(OptimizerKind::Nesterov, hp, std::nullopt, {3});
  for (std::int64_t i = 0; i < 100; ++i) {
    EXPECT_EQ(clmr.rates_at(i).lr, lr_at(i, cyc));
    EXPECT_EQ(clmr.rates_at(i).mr, mr_at(i, cyc));
    EXPECT_EQ(clr.rates_at(i).lr, lr_at(i, cyc));
    EXPECT_EQ(clr.rates_at(i).mr, hp.beta);
    EXPECT_EQ(nest.rates_at(i).lr, hp.alpha);
    EXPECT_EQ(nest.rates_at(i).mr, hp.beta);
  }
}

TEST(Optim, FreeFunctionsMatchDriver) {
  oracle::ScalarSetup s;
  s.lambda = 3.0;
  HyperParams hp;
  auto st = OptimizerState::zeros(OptimizerKind::Nesterov, 1);
  std::vector<double> x{s.x0};
  const auto ref = run_library(OptimizerKind::Nesterov, s, 20);
  for (int i = 0; i < 20; ++i) {
    const auto la = lookahead_point(x, st, hp.beta);
    const std::vector<double> g{s.lambda * la[0]};
    nesterov_step(x, g, st, hp);
    EXPECT_NEAR(x[0], ref[i], 1e-15);
  }
  EXPECT_EQ(st.step_count, 20);

  auto cs = OptimizerState::zeros(OptimizerKind::Clmr, 1);
  CycleConfig cyc;
  cyc.c_lr = s.c_lr;
  cyc.c_mr = s.c_mr;
  cyc.it_per_epoch = s.it;
  std::vector<double> y{s.x0};
  const auto cref = oracle::simulate(oracle::Rule::Clmr, s, 20);
  for (std::int64_t i = 0; i < 20; ++i) {
    const auto la = lookahead_point(y, cs, mr_at(i, cyc));
    const std::vector<double> g{s.lambda * la[0]};
    clmr_step(y, g, cs, TrainClock{i, 1}, cyc, hp);
    EXPECT_NEAR(y[0], cref[std::size_t(i)], 1e-12);
  }
}

TEST(Optim, StateBuffersMatchKind) {
  const auto adam = OptimizerState::zeros(OptimizerKind::Adam, 4);
  EXPECT_EQ(adam.m.size(), 4u);
  EXPECT_EQ(adam.v.size(), 4u);
  EXPECT_TRUE(adam.prev_delta.empty());
  const auto sgd = OptimizerState::zeros(OptimizerKind::Sgd, 4);
  EXPECT_TRUE(sgd.m.empty() && sgd.prev_delta.empty() && sgd.grad_sq_accum.empty());
  EXPECT_EQ(OptimizerState::zeros(OptimizerKind::AdaGrad, 2).grad_sq_accum.size(), 2u);
}

TEST(Optim, Errors) {
  HyperParams hp;
  EXPECT_THROW(Optimizer(OptimizerKind::Clmr, hp, std::nullopt, {1}), ConfigError);
  std::vector<double> x(3), g(2);
  EXPECT_THROW(sgd_step(x, g, hp), ShapeError);
  auto st = OptimizerState::zeros(OptimizerKind::Adam, 3);
  std::vector<double> g3(3);
  EXPECT_THROW(momentum_step(x, g3, st, hp), ConfigError);
  HyperParams bad;
  bad.beta = 1.0;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = {};
  bad.alpha = -1;
  EXPECT_THROW(bad.validate(), ConfigError);

  Optimizer nest(OptimizerKind::Nesterov, hp, std::nullopt, {1});
  std::vector<double> p{1.0}, q{0.5};
  std::vector<std::span<double>> ps{std::span<double>(p)};
  std::vector<std::span<const double>> gs{std::span<const double>(q)};
  EXPECT_THROW(nest.apply(ps, gs, 0), ConfigError);
}
