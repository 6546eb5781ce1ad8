#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "test_support.hpp"
#include "tmknet/error.hpp"
#include "tmknet/linalg.hpp"

using namespace tmknet;
using tmknet::testing::random_spd;
using tmknet::testing::random_spd_gapped;
using tmknet::testing::rel_err;

namespace {

void expect_valid_eig(const Tensor& m, const SymEig& e) {
  const std::size_t n = m.dim(0);
  EXPECT_LE(frobenius_norm(reconstruct(e.vectors, e.values) - m), 1e-10 * std::max(frobenius_norm(m), 1.0));
  const Tensor utu = matmul(transpose(e.vectors), e.vectors);
  EXPECT_LE(frobenius_norm(utu - Tensor::identity(n)), 1e-10 * static_cast<double>(n));
  EXPECT_TRUE(std::is_sorted(e.values.begin(), e.values.end()));
}

}  // namespace

TEST(SymEig, DiagonalInputGivesSortedValuesAndPermutedAxes) {
  const SymEig e = sym_eig(Tensor::diag({3, 1}));
  EXPECT_DOUBLE_EQ(e.values[0], 1.0);
  EXPECT_DOUBLE_EQ(e.values[1], 3.0);
  EXPECT_DOUBLE_EQ(std::abs(e.vectors.at(1, 0)), 1.0);
  EXPECT_DOUBLE_EQ(std::abs(e.vectors.at(0, 1)), 1.0);
}

TEST(SymEig, IdentityHasUnitSpectrum) {
  const SymEig e = sym_eig(Tensor::identity(4));
  for (double v : e.values) EXPECT_DOUBLE_EQ(v, 1.0);
  EXPECT_LE(frobenius_norm(matmul(e.vectors, transpose(e.vectors)) - Tensor::identity(4)), 1e-14);
}

TEST(SymEig, TwoByTwoCharacteristicPolynomial) {
  // det([[2-l,1],[1,2-l]]) = (2-l)^2 - 1 -> l in {1, 3}
  const SymEig e = sym_eig(Tensor::matrix(2, 2, {2, 1, 1, 2}));
  EXPECT_NEAR(e.values[0], 1.0, 1e-14);
  EXPECT_NEAR(e.values[1], 3.0, 1e-14);
  const double r = 1.0 / std::numbers::sqrt2;
  EXPECT_NEAR(std::abs(e.vectors.at(0, 0)), r, 1e-14);
  EXPECT_NEAR(e.vectors.at(0, 0) * e.vectors.at(1, 0), -0.5, 1e-14);
  EXPECT_NEAR(e.vectors.at(0, 1) * e.vectors.at(1, 1), 0.5, 1e-14);
}

TEST(SymEig, InvariantsHoldForBothSolvers) {
  Rng rng(11);
  for (std::size_t n : {1u, 2u, 5u, 10u, 30u, 32u, 33u, 40u, 64u}) {
    for (int rep = 0; rep < 3; ++rep) {
      const Tensor m = tmknet::testing::random_symmetric(n, rng);
      expect_valid_eig(m, sym_eig(m));
    }
  }
}

TEST(SymEig, BothSolversAgreeOnSpectrum) {
  Rng rng(3);
  const Tensor m = random_spd(20, rng);
  std::vector<double> a(m.data().begin(), m.data().end()), b = a, va, vb, da, db;
  detail::jacobi_eig(a, 20, va, da);
  detail::tridiagonal_ql_eig(b, 20, vb, db);
  std::sort(da.begin(), da.end());
  std::sort(db.begin(), db.end());
  for (std::size_t i = 0; i < 20; ++i) EXPECT_NEAR(da[i], db[i], 1e-12 * db.back());
}

TEST(SymEig, SpdEigenvaluesArePositive) {
  Rng rng(5);
  for (int rep = 0; rep < 20; ++rep) {
    const SymEig e = sym_eig(random_spd(8, rng, 1e-3, 1e3));
    EXPECT_GT(e.values.front(), 0.0);
  }
}

TEST(SymEig, RejectsBadInput) {
  EXPECT_THROW(sym_eig(Tensor({2, 3})), ShapeError);
  EXPECT_THROW(sym_eig(Tensor::matrix(2, 2, {1, 2, 0, 1})), ShapeError);
  // Tiny asymmetry is symmetrized away.
  EXPECT_NO_THROW(sym_eig(Tensor::matrix(2, 2, {1, 0.5, 0.5 + 1e-12, 1})));
}

TEST(SymFn, Examples) {
  EXPECT_LE(frobenius_norm(sym_fn(Tensor::identity(3), SpectralFn::log())), 1e-15);
  EXPECT_LE(max_abs_diff(sym_fn(Tensor::diag({4, 9}), SpectralFn::sqrt()), Tensor::diag({2, 3})), 1e-14);
  const double e = std::numbers::e;
  EXPECT_LE(max_abs_diff(sym_fn(Tensor::diag({e, e * e}), SpectralFn::log()), Tensor::diag({1, 2})), 1e-14);
}

TEST(SymFn, RejectsNonPositiveSpectrumWhereRequired) {
  const Tensor m = Tensor::diag({-1, 2});
  EXPECT_THROW(sym_fn(m, SpectralFn::log()), NumericalError);
  EXPECT_THROW(sym_fn(m, SpectralFn::sqrt()), NumericalError);
  EXPECT_THROW(sym_fn(m, SpectralFn::pow(0.5)), NumericalError);
  EXPECT_NO_THROW(sym_fn(m, SpectralFn::exp()));
  EXPECT_LE(max_abs_diff(sym_fn(m, SpectralFn::clamp_min(0.5)), Tensor::diag({0.5, 2})), 1e-15);
}

TEST(SymFn, LogExpRoundTrip) {
  Rng rng(7);
  for (int rep = 0; rep < 50; ++rep) {
    const Tensor m = random_spd(6, rng, 1e-2, 1e2);
    const Tensor back = sym_fn(sym_fn(m, SpectralFn::log()), SpectralFn::exp());
    EXPECT_LE(frobenius_norm(back - m), 1e-8 * frobenius_norm(m));
  }
}

TEST(SymFn, PowerOneIsIdentityMap) {
  Rng rng(9);
  const Tensor m = random_spd(7, rng);
  EXPECT_LE(frobenius_norm(sym_fn(m, SpectralFn::pow(1.0)) - m), 1e-12 * frobenius_norm(m));
}

TEST(SymFnVjp, DiagonalLogExample) {
  const Tensor g = sym_fn_vjp(Tensor::diag({1, 2}), SpectralFn::log(), Tensor::identity(2));
  EXPECT_LE(max_abs_diff(g, Tensor::diag({1, 0.5})), 1e-14);
}

TEST(SymFnVjp, SquareAtIdentityDoublesUpstream) {
  Rng rng(2);
  const Tensor s = rng.normal_tensor({3, 3});
  const Tensor g = sym_fn_vjp(Tensor::identity(3), SpectralFn::pow(2.0), s);
  EXPECT_LE(max_abs_diff(g, symmetrize(s) * 2.0), 1e-13);
}

namespace {

/// Central difference of <upstream, f(m)> along symmetric direction d.
double fd_directional(const Tensor& m, const SpectralFn& f, const Tensor& upstream, const Tensor& d, double h) {
  const double fp = dot(upstream, sym_fn(m + d * h, f));
  const double fm = dot(upstream, sym_fn(m - d * h, f));
  return (fp - fm) / (2.0 * h);
}

double vjp_fd_error(const Tensor& m, const SpectralFn& f, Rng& rng) {
  const std::size_t n = m.dim(0);
  const Tensor up = rng.normal_tensor({n, n});
  const Tensor g = sym_fn_vjp(m, f, up);
  std::vector<double> a, b;
  for (int k = 0; k < 8; ++k) {
    Tensor d = symmetrize(rng.normal_tensor({n, n}));
    d *= 1.0 / frobenius_norm(d);
    a.push_back(dot(g, d));
    b.push_back(fd_directional(m, f, up, d, 1e-6));
  }
  return rel_err(a, b);
}

}  // namespace

TEST(SymFnVjp, RandomLogMatchesFiniteDifferences) {
  Rng rng(13);
  EXPECT_LT(vjp_fd_error(random_spd_gapped(5, rng, 0.5, 3.0, 0.1), SpectralFn::log(), rng), 1e-5);
}

TEST(SymFnVjp, PropertyAcrossFunctions) {
  Rng rng(17);
  const SpectralFn fns[] = {SpectralFn::log(), SpectralFn::exp(), SpectralFn::pow(0.3), SpectralFn::clamp_min(1e-4)};
  for (const SpectralFn& f : fns) {
    double worst = 0.0;
    for (int rep = 0; rep < 100; ++rep) {
      const Tensor m = random_spd_gapped(5, rng, 0.05, 2.0, 1e-3);
      worst = std::max(worst, vjp_fd_error(m, f, rng));
    }
    EXPECT_LT(worst, 1e-5) << f.name();
  }
}

TEST(SymFnVjp, DegenerateSpectrumUsesDerivative) {
  // f = log at 2 I: K_ij = 1/2 everywhere, so the vjp is sym(G)/2.
  Rng rng(19);
  const Tensor up = rng.normal_tensor({4, 4});
  const Tensor g = sym_fn_vjp(Tensor::identity(4) * 2.0, SpectralFn::log(), up);
  EXPECT_LE(max_abs_diff(g, symmetrize(up) * 0.5), 1e-14);
  EXPECT_TRUE(g.all_finite());
}

TEST(BatchedApply, MatchesSerialCallsBitExactly) {
  Rng rng(23);
  const Tensor batch = tmknet::testing::spd_batch(8, 5, rng);
  auto op = [](const Tensor& m) { return sym_fn(m, SpectralFn::log()); };
  const Tensor out = batched_apply(batch, op);
  for (std::size_t i = 0; i < 8; ++i) EXPECT_EQ(out.slice(i), op(batch.slice(i)));
  const Tensor one = tmknet::testing::spd_batch(1, 5, rng);
  EXPECT_EQ(batched_apply(one, op).slice(0), op(one.slice(0)));
  const Tensor empty({0, 5, 5});
  EXPECT_EQ(batched_apply(empty, op).size(), 0u);
}
