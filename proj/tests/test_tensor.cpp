#include <gtest/gtest.h>

#include "tmknet/error.hpp"
#include "tmknet/tensor.hpp"

using tmknet::Shape;
using tmknet::Tensor;

TEST(Tensor, ShapeAndDataLengthAgree) {
  Tensor t({2, 3, 4});
  EXPECT_EQ(t.size(), 24u);
  EXPECT_EQ(t.rank(), 3u);
  EXPECT_THROW(Tensor(Shape{2, 2}, std::vector<double>{1, 2, 3}), tmknet::ShapeError);
}

TEST(Tensor, RowMajorIndexing) {
  Tensor t({2, 3}, std::vector<double>{0, 1, 2, 3, 4, 5});
  EXPECT_EQ(t.at(1, 2), 5.0);
  EXPECT_EQ(t.at(0, 1), 1.0);
  EXPECT_THROW(t.at(2, 0), tmknet::ShapeError);
}

TEST(Tensor, MatmulMatchesHandProduct) {
  const Tensor a = Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6});
  const Tensor b = Tensor::matrix(3, 2, {7, 8, 9, 10, 11, 12});
  const Tensor c = tmknet::matmul(a, b);
  EXPECT_EQ(c, Tensor::matrix(2, 2, {58, 64, 139, 154}));
  EXPECT_THROW(tmknet::matmul(a, a), tmknet::ShapeError);
}

TEST(Tensor, TransposeAndCongruence) {
  const Tensor a = Tensor::matrix(1, 2, {1, 2});
  const Tensor x = Tensor::matrix(2, 2, {2, 1, 1, 3});
  // [1 2] [[2,1],[1,3]] [1 2]^T = 2 + 2 + 2 + 12
  EXPECT_DOUBLE_EQ(tmknet::congruence(a, x).item(), 18.0);
  EXPECT_EQ(tmknet::transpose(a).shape(), (Shape{2, 1}));
}

TEST(Tensor, SliceAndStackRoundTrip) {
  const Tensor a = Tensor::identity(2);
  const Tensor b = Tensor::diag({3, 4});
  const Tensor s = tmknet::stack(std::vector<Tensor>{a, b});
  EXPECT_EQ(s.shape(), (Shape{2, 2, 2}));
  EXPECT_EQ(s.slice(1), b);
  Tensor t = s;
  t.set_slice(0, b);
  EXPECT_EQ(t.slice(0), b);
}

TEST(Tensor, ReductionsAndNorms) {
  const Tensor m = Tensor::matrix(2, 2, {3, 0, 0, 4});
  EXPECT_DOUBLE_EQ(tmknet::frobenius_norm(m), 5.0);
  EXPECT_DOUBLE_EQ(tmknet::trace(m), 7.0);
  EXPECT_DOUBLE_EQ(tmknet::dot(m, m), 25.0);
  EXPECT_FALSE(Tensor({1}, std::vector<double>{NAN}).all_finite());
}

TEST(Tensor, ArithmeticChecksShapes) {
  Tensor a({2});
  Tensor b({3});
  EXPECT_THROW(a += b, tmknet::ShapeError);
  EXPECT_EQ((Tensor({2}, {1, 2}) * 2.0), Tensor({2}, std::vector<double>{2, 4}));
}
