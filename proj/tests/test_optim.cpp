#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <map>
#include <string>

#include "test_support.hpp"
#include "tmknet/autodiff.hpp"
#include "tmknet/error.hpp"
#include "tmknet/optim.hpp"
#include "tmknet/spd.hpp"

using namespace tmknet;
using optim::AdamConfig;
using optim::Manifold;
using optim::ParamStore;
using optim::Role;

namespace {

ParamStore mixed_store(Rng& rng) {
  ParamStore s;
  s.add("conv.weight", Manifold::Euclidean, Role::Weight, rng.normal_tensor({3, 4}));
  s.add("conv.bias", Manifold::Euclidean, Role::Bias, rng.normal_tensor({3}));
  s.add("bn.gamma", Manifold::Euclidean, Role::NormAffine, rng.normal_tensor({3}));
  s.add("bimap.weight", Manifold::Stiefel, Role::Manifold, optim::random_stiefel(3, 6, rng));
  s.add("bias_mean", Manifold::Spd, Role::Manifold, tmknet::testing::random_spd(4, rng));
  s.add("log_dispersion", Manifold::LogScalar, Role::Manifold, Tensor::scalar(0.3));
  return s;
}

std::map<std::string, Tensor> random_grads(const ParamStore& s, Rng& rng, double sd) {
  std::map<std::string, Tensor> g;
  for (const auto& e : s.entries()) {
    Tensor t = rng.normal_tensor(e.value.shape(), sd);
    if (e.manifold == Manifold::Spd) t = symmetrize(t);
    g[e.name] = t;
  }
  return g;
}

void expect_identical(const Tensor& a, const Tensor& b) {
  ASSERT_EQ(a.shape(), b.shape());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i], b[i]);
}

}  // namespace

TEST(AdamStep, ZeroGradientLeavesValuesAndAdvancesSteps) {
  Rng rng(3);
  ParamStore s = mixed_store(rng);
  const ParamStore before = s;
  AdamConfig cfg;
  cfg.weight_decay = 0.0;
  std::map<std::string, Tensor> zeros;
  for (const auto& e : s.entries()) zeros[e.name] = Tensor(e.value.shape());
  optim::adam_step(s, zeros, cfg);
  optim::adam_step(s, {}, cfg);
  for (std::size_t i = 0; i < s.entries().size(); ++i) {
    expect_identical(s.entries()[i].value, before.entries()[i].value);
    EXPECT_EQ(s.entries()[i].step, 2);
  }
}

TEST(AdamStep, ZeroGradientOnlyDecaysEuclideanWeights) {
  Rng rng(4);
  ParamStore s = mixed_store(rng);
  const ParamStore before = s;
  AdamConfig cfg;
  cfg.lr = 0.1;
  cfg.weight_decay = 0.01;
  optim::adam_step(s, {}, cfg);
  for (std::size_t i = 0; i < s.entries().size(); ++i) {
    const auto& e = s.entries()[i];
    const Tensor& old = before.entries()[i].value;
    if (e.name == "conv.weight") {
      for (std::size_t k = 0; k < old.size(); ++k) EXPECT_DOUBLE_EQ(e.value[k], old[k] * (1.0 - 0.1 * 0.01));
    } else {
      expect_identical(e.value, old);
    }
  }
}

TEST(AdamStep, OneStepScalarMatchesHandRecurrence) {
  for (double g : {0.5, -2.0, 1e-3}) {
    ParamStore s;
    s.add("w", Manifold::Euclidean, Role::Bias, Tensor::scalar(0.0));
    AdamConfig cfg;
    optim::adam_step(s, {{"w", Tensor::scalar(g)}}, cfg);
    const double m = (1.0 - cfg.beta1) * g / (1.0 - cfg.beta1);
    const double v = (1.0 - cfg.beta2) * g * g / (1.0 - cfg.beta2);
    const double expected = -cfg.lr * m / (std::sqrt(v) + cfg.eps);
    EXPECT_NEAR(s.value("w")[0], expected, 1e-15);
    EXPECT_NEAR(std::abs(s.value("w")[0]), cfg.lr, 1e-7);
  }
}

TEST(AdamStep, LogScalarIsAdamOnTheLogValue) {
  ParamStore a, b;
  a.add("s", Manifold::LogScalar, Role::Manifold, Tensor::scalar(0.2));
  b.add("s", Manifold::Euclidean, Role::Bias, Tensor::scalar(0.2));
  AdamConfig cfg;
  cfg.lr = 0.05;
  Rng rng(5);
  for (int i = 0; i < 20; ++i) {
    const Tensor g = Tensor::scalar(rng.uniform(-1.0, 1.0));
    optim::adam_step(a, {{"s", g}}, cfg);
    optim::adam_step(b, {{"s", g}}, cfg);
  }
  EXPECT_EQ(a.value("s")[0], b.value("s")[0]);
}

TEST(WeightDecay, OnlyEuclideanWeights) {
  EXPECT_DOUBLE_EQ(optim::weight_decay_for(Manifold::Euclidean, Role::Weight, 1e-4), 1e-4);
  EXPECT_EQ(optim::weight_decay_for(Manifold::Euclidean, Role::Bias, 1e-4), 0.0);
  EXPECT_EQ(optim::weight_decay_for(Manifold::Euclidean, Role::NormAffine, 1e-4), 0.0);
  EXPECT_EQ(optim::weight_decay_for(Manifold::Stiefel, Role::Manifold, 1e-4), 0.0);
  EXPECT_EQ(optim::weight_decay_for(Manifold::Spd, Role::Manifold, 1e-4), 0.0);
  EXPECT_EQ(optim::weight_decay_for(Manifold::LogScalar, Role::Manifold, 1e-4), 0.0);
}

TEST(Stiefel, ProjectionIsTangent) {
  Rng rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor w = optim::random_stiefel(4, 9, rng);
    const Tensor p = optim::stiefel_project(w, rng.normal_tensor({4, 9}));
    const Tensor skew = matmul(w, transpose(p)) + matmul(p, transpose(w));
    EXPECT_LT(frobenius_norm(skew), 1e-12);
    const Tensor pp = optim::stiefel_project(w, p);
    EXPECT_LT(frobenius_norm(pp - p), 1e-12);
  }
}

TEST(Stiefel, RetractionFixesOrthonormalRowsAndSignConvention) {
  Rng rng(7);
  const Tensor w = optim::random_stiefel(3, 7, rng);
  EXPECT_LT(frobenius_norm(optim::stiefel_retract(w) - w), 1e-13);
  // Positive diagonal of R: each retracted row has a positive inner product with its source row.
  const Tensor m = rng.normal_tensor({3, 7});
  const Tensor q = optim::stiefel_retract(m);
  for (std::size_t i = 0; i < 3; ++i) {
    double d = 0.0;
    for (std::size_t k = 0; k < 7; ++k) d += q.at(i, k) * m.at(i, k);
    EXPECT_GT(d, 0.0);
  }
  EXPECT_LT(optim::stiefel_defect(q), 1e-13);
}

TEST(Stiefel, RetractionErrors) {
  Tensor m({2, 4});
  m.at(0, 0) = 1.0;
  m.at(1, 0) = 2.0;
  EXPECT_THROW(optim::stiefel_retract(m), NumericalError);
  EXPECT_THROW(optim::stiefel_retract(Tensor({5, 3})), ShapeError);
}

TEST(Stiefel, HundredRandomStepsStayFeasible) {
  Rng rng(8);
  ParamStore s;
  s.add("w", Manifold::Stiefel, Role::Manifold, optim::random_stiefel(30, 40, rng));
  AdamConfig cfg;
  cfg.lr = 0.05;
  for (int i = 0; i < 100; ++i) {
    optim::adam_step(s, {{"w", rng.normal_tensor({30, 40}, 3.0)}}, cfg);
    ASSERT_LT(optim::stiefel_defect(s.value("w")), 1e-6) << "step " << i;
  }
}

TEST(Feasibility, ThousandRandomStepsEveryManifold) {
  Rng rng(9);
  ParamStore s = mixed_store(rng);
  AdamConfig cfg;
  cfg.lr = 0.02;
  for (int i = 0; i < 1000; ++i) {
    optim::adam_step(s, random_grads(s, rng, 2.0), cfg);
    ASSERT_LT(optim::stiefel_defect(s.value("bimap.weight")), 1e-6) << "step " << i;
    const Tensor& g = s.value("bias_mean");
    ASSERT_LT(frobenius_norm(g - transpose(g)), 1e-12);
    ASSERT_GT(spd::min_eigenvalue(g), 0.0) << "step " << i;
    ASSERT_GT(std::exp(s.value("log_dispersion")[0]), 0.0);
  }
}

TEST(Descent, ConvexQuadratic) {
  // f(x) = 0.5 * sum_i a_i (x_i - c_i)^2
  const std::vector<double> a = {1.0, 2.0, 5.0, 0.5, 3.0};
  const std::vector<double> c = {0.3, -0.2, 0.1, 0.4, -0.5};
  auto objective = [&](const Tensor& x) {
    double f = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) f += 0.5 * a[i] * (x[i] - c[i]) * (x[i] - c[i]);
    return f;
  };
  ParamStore s;
  s.add("x", Manifold::Euclidean, Role::Bias, Tensor({a.size()}));
  AdamConfig cfg;
  cfg.lr = 0.01;
  const double f0 = objective(s.value("x"));
  for (int step = 0; step < 500; ++step) {
    const Tensor& x = s.value("x");
    Tensor g({a.size()});
    for (std::size_t i = 0; i < a.size(); ++i) g[i] = a[i] * (x[i] - c[i]);
    optim::adam_step(s, {{"x", g}}, cfg);
  }
  EXPECT_LT(objective(s.value("x")), 1e-6 * f0);
}

TEST(Descent, SpdParameterApproachesTarget) {
  Rng rng(10);
  const Tensor target = tmknet::testing::random_spd(4, rng, 0.5, 3.0);
  const Tensor inv_sqrt = sym_fn(target, SpectralFn::inv_sqrt());
  ParamStore s;
  s.add("g", Manifold::Spd, Role::Manifold, Tensor::identity(4));
  AdamConfig cfg;
  cfg.lr = 0.05;
  const double d0 = spd::airm_dist(s.value("g"), target);
  for (int step = 0; step < 400; ++step) {
    ad::Tape tape;
    const ad::Var x = tape.leaf(s.value("g"));
    const ad::Var y = ad::congruence(tape.constant(inv_sqrt), ad::reshape(x, {1, 4, 4}));
    const ad::Var loss = ad::scale(ad::sum(ad::square(ad::sym_fn(y, SpectralFn::log()))), 0.5);
    tape.backward(loss);
    optim::adam_step(s, {{"g", tape.grad(x)}}, cfg);
  }
  EXPECT_LT(spd::airm_dist(s.value("g"), target), 0.05 * d0);
}

TEST(Descent, StiefelFindsDominantSubspace) {
  // Maximize tr(W C W^T); optimum is the sum of the top-p eigenvalues.
  Rng rng(11);
  const Tensor q = tmknet::testing::orthogonal(6, rng);
  const Tensor c = tmknet::testing::with_spectrum(q, {0.1, 0.3, 0.5, 2.0, 3.0, 4.0});
  ParamStore s;
  s.add("w", Manifold::Stiefel, Role::Manifold, optim::random_stiefel(2, 6, rng));
  AdamConfig cfg;
  cfg.lr = 0.02;
  for (int step = 0; step < 600; ++step) {
    const Tensor& w = s.value("w");
    optim::adam_step(s, {{"w", matmul(w, c) * -2.0}}, cfg);
  }
  const Tensor& w = s.value("w");
  EXPECT_NEAR(trace(matmul(matmul(w, c), transpose(w))), 7.0, 1e-2);
  EXPECT_LT(optim::stiefel_defect(w), 1e-6);
}

TEST(Determinism, IdenticalInputsGiveBitIdenticalTrajectories) {
  auto run = [] {
    Rng init(12), noise(13);
    ParamStore s = mixed_store(init);
    AdamConfig cfg;
    cfg.lr = 0.03;
    for (int i = 0; i < 50; ++i) optim::adam_step(s, random_grads(s, noise, 1.0), cfg);
    return s;
  };
  const ParamStore a = run(), b = run();
  for (std::size_t i = 0; i < a.entries().size(); ++i) {
    expect_identical(a.entries()[i].value, b.entries()[i].value);
    expect_identical(a.entries()[i].first_moment, b.entries()[i].first_moment);
  }
}

TEST(AdamStep, NonFiniteGradientAbortsBeforeAnyUpdate) {
  Rng rng(14);
  ParamStore s = mixed_store(rng);
  const ParamStore before = s;
  auto g = random_grads(s, rng, 1.0);
  g["log_dispersion"] = Tensor::scalar(std::numeric_limits<double>::quiet_NaN());
  EXPECT_THROW(optim::adam_step(s, g, AdamConfig{}), NumericalError);
  for (std::size_t i = 0; i < s.entries().size(); ++i) {
    expect_identical(s.entries()[i].value, before.entries()[i].value);
    EXPECT_EQ(s.entries()[i].step, 0);
  }
}

TEST(AdamStep, ShapeAndNameErrors) {
  Rng rng(15);
  ParamStore s = mixed_store(rng);
  EXPECT_THROW(optim::adam_step(s, {{"conv.weight", Tensor({4, 3})}}, AdamConfig{}), ShapeError);
  EXPECT_THROW(optim::adam_step(s, {{"missing", Tensor({1})}}, AdamConfig{}), ConfigError);
  EXPECT_THROW(s.add("conv.weight", Manifold::Euclidean, Role::Weight, Tensor({1})), ConfigError);
}

TEST(ManifoldTags, RoundTrip) {
  for (Manifold m : {Manifold::Euclidean, Manifold::Stiefel, Manifold::Spd, Manifold::LogScalar})
    EXPECT_EQ(optim::manifold_from_name(optim::manifold_name(m)), m);
  EXPECT_THROW(optim::manifold_from_name("hyperbolic"), DataError);
}
