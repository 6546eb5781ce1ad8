#include <gtest/gtest.h>

#include "grad_cases.hpp"
#include "test_support.hpp"
#include "tmknet/autodiff.hpp"
#include "tmknet/error.hpp"

using namespace tmknet;
using ad::Tape;
using ad::Var;

TEST(Tape, RecordReproducesForwardValues) {
  Tape t;
  const Var a = t.leaf(Tensor::matrix(2, 2, {1, 2, 3, 4}));
  const Var b = t.leaf(Tensor::matrix(2, 2, {5, 6, 7, 8}));
  EXPECT_EQ(ad::add(a, b).value(), a.value() + b.value());
  EXPECT_EQ(ad::matmul(a, b).value(), matmul(a.value(), b.value()));
}

TEST(Tape, SumGradientIsOnes) {
  Tape t;
  const Var x = t.leaf(Tensor({5}, std::vector<double>{1, -2, 3, 0, 7}));
  t.backward(ad::sum(x));
  EXPECT_EQ(t.grad(x), Tensor({5}, 1.0));
}

TEST(Tape, SquaredNormOfMatrixVectorProduct) {
  // d/dW ||W x||^2 = 2 (W x) x^T
  Rng rng(1);
  const Tensor w = rng.normal_tensor({3, 4});
  const Tensor x = rng.normal_tensor({4, 1});
  Tape t;
  const Var W = t.leaf(w);
  const Var y = ad::matmul(W, t.constant(x));
  t.backward(ad::sum(ad::square(y)));
  const Tensor expected = matmul(matmul(w, x), transpose(x)) * 2.0;
  EXPECT_LE(max_abs_diff(t.grad(W), expected), 1e-13);
}

TEST(Tape, ChainOfThreeOpsMatchesFiniteDifferences) {
  Rng rng(2);
  const auto r = tmknet::testing::grad_check(
      [](Tape&, const std::vector<Var>& v) { return ad::sum(ad::exp(ad::scale(ad::square(v[0]), 0.5))); },
      {{rng.normal_tensor({6})}}, rng);
  EXPECT_LT(r.worst, 1e-6);
}

TEST(Tape, BackwardGuards) {
  Tape t;
  const Var x = t.leaf(Tensor({3}, 1.0));
  EXPECT_THROW(t.backward(x), ShapeError);
  const Var s = ad::sum(x);
  t.backward(s);
  EXPECT_THROW(t.backward(s), StateError);
  EXPECT_THROW(ad::sum(x), StateError);
}

TEST(Tape, MixingTapesIsRejected) {
  Tape a, b;
  const Var x = a.leaf(Tensor({2}, 1.0));
  const Var y = b.leaf(Tensor({2}, 1.0));
  EXPECT_THROW(ad::add(x, y), StateError);
}

TEST(Tape, UnreachedLeafGetsZeros) {
  Tape t;
  const Var x = t.leaf(Tensor({3}, 2.0));
  const Var unused = t.leaf(Tensor({2, 2}, 5.0));
  t.backward(ad::sum(ad::square(x)));
  EXPECT_EQ(t.grad(unused), Tensor({2, 2}));
}

TEST(Tape, LinearityOfBackward) {
  Rng rng(3);
  const Tensor xv = rng.normal_tensor({4});
  auto f = [](const Var& x) { return ad::sum(ad::exp(x)); };
  auto g = [](const Var& x) { return ad::sum(ad::square(x)); };
  const double a = 0.75, b = -2.0;
  Tensor gf, gg, gc;
  {
    Tape t;
    const Var x = t.leaf(xv);
    t.backward(f(x));
    gf = t.grad(x);
  }
  {
    Tape t;
    const Var x = t.leaf(xv);
    t.backward(g(x));
    gg = t.grad(x);
  }
  {
    Tape t;
    const Var x = t.leaf(xv);
    t.backward(ad::add(ad::scale(f(x), a), ad::scale(g(x), b)));
    gc = t.grad(x);
  }
  EXPECT_EQ(gc, gf * a + gg * b);
}

TEST(Tape, NonFiniteForwardIsReported) {
  Tape t;
  const Var x = t.leaf(Tensor({1}, std::vector<double>{-1.0}));
  EXPECT_THROW(ad::log(x), NumericalError);
}

TEST(Ops, MaxPoolTiesRouteToEarliestIndex) {
  Tape t;
  const Var x = t.leaf(Tensor({1, 4}, std::vector<double>{2, 2, 1, 2}));
  t.backward(ad::sum(ad::max_pool_last(x, 4)));
  EXPECT_EQ(t.grad(x), Tensor({1, 4}, std::vector<double>{1, 0, 0, 0}));
}

TEST(Ops, ConvolutionHandExample) {
  Tape t;
  const Var x = t.leaf(Tensor({1, 1, 1, 4}, std::vector<double>{1, 2, 3, 4}));
  const Var w = t.leaf(Tensor({1, 1, 1, 2}, std::vector<double>{1, -1}));
  const Var b = t.leaf(Tensor({1}, std::vector<double>{0.5}));
  EXPECT_EQ(ad::conv2d(x, w, b).value(), Tensor({1, 1, 1, 3}, std::vector<double>{-0.5, -0.5, -0.5}));
}

TEST(Ops, CovarianceHandExample) {
  Tape t;
  const Var x = t.leaf(Tensor({1, 2, 2}, std::vector<double>{1, -1, 1, 1}));
  const Tensor c = ad::covariance(x, ad::CovRegularizer::fixed(0.01)).value();
  EXPECT_NEAR(c.at(0, 0, 0), 2.01, 1e-15);
  EXPECT_NEAR(c.at(0, 1, 1), 0.01, 1e-15);
  EXPECT_NEAR(c.at(0, 0, 1), 0.0, 1e-15);
}

class OpGradient : public ::testing::TestWithParam<tmknet::testing::GradCase> {};

TEST_P(OpGradient, ThirtyRandomInstancesMatchFiniteDifferences) {
  const auto& c = GetParam();
  Rng rng(mix_seed(99, std::hash<std::string>{}(c.name)));
  double worst = 0.0;
  for (int i = 0; i < 30; ++i) {
    const auto inst = c.make(rng);
    worst = std::max(worst, tmknet::testing::grad_check(inst.build, inst.inputs, rng).worst);
  }
  EXPECT_LT(worst, c.tolerance) << c.name;
}

INSTANTIATE_TEST_SUITE_P(AllOps, OpGradient, ::testing::ValuesIn(tmknet::testing::op_grad_cases()),
                         [](const auto& info) {
                           std::string s;
                           for (char ch : info.param.name) s += std::isalnum(static_cast<unsigned char>(ch)) ? ch : '_';
                           return s;
                         });
