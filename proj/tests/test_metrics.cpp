#include <gtest/gtest.h>

#include "tmknet/error.hpp"
#include "tmknet/metrics.hpp"
#include "tmknet/random.hpp"
#include "wilcoxon_oracle.hpp"

using namespace tmknet;
using metrics::ConfusionMatrix;

TEST(Metrics, PerfectPredictor) {
  const std::vector<std::size_t> y{0, 1, 2, 1, 0};
  const ConfusionMatrix cm(3, y, y);
  EXPECT_DOUBLE_EQ(cm.accuracy(), 1.0);
  EXPECT_DOUBLE_EQ(cm.macro_f1(), 1.0);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j)
      if (i != j) {
        EXPECT_EQ(cm.at(i, j), 0u);
      }
}

TEST(Metrics, HandComputedThreeSamples) {
  // truth (A,B,B), predicted (A,A,B): A has P=1/2 R=1, B has P=1 R=1/2.
  const ConfusionMatrix cm(2, {0, 1, 1}, {0, 0, 1});
  EXPECT_NEAR(cm.accuracy(), 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(cm.f1(0), 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(cm.f1(1), 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(cm.macro_f1(), 2.0 / 3.0, 1e-15);
}

TEST(Metrics, AllOneClassPredictorOnBalancedData) {
  std::vector<std::size_t> truth, pred;
  for (std::size_t k = 0; k < 4; ++k)
    for (int i = 0; i < 5; ++i) {
      truth.push_back(k);
      pred.push_back(0);
    }
  const ConfusionMatrix cm(4, truth, pred);
  EXPECT_DOUBLE_EQ(cm.accuracy(), 0.25);
  EXPECT_NEAR(cm.macro_f1(), 0.1, 1e-15);
}

TEST(Metrics, ReportIsDerivableFromConfusionMatrix) {
  Rng rng(4);
  std::vector<std::size_t> truth, pred;
  for (int i = 0; i < 200; ++i) {
    truth.push_back(rng.index(5));
    pred.push_back(rng.index(5));
  }
  const ConfusionMatrix cm(5, truth, pred);
  const auto r = metrics::report_from(cm);
  std::uint64_t diag = 0, total = 0;
  for (std::size_t i = 0; i < 5; ++i) {
    std::uint64_t row = 0;
    for (std::size_t j = 0; j < 5; ++j) {
      row += r.confusion[i][j];
      total += r.confusion[i][j];
    }
    diag += r.confusion[i][i];
    EXPECT_EQ(row, static_cast<std::uint64_t>(std::count(truth.begin(), truth.end(), i)));
  }
  EXPECT_EQ(r.accuracy, static_cast<double>(diag) / static_cast<double>(total));
  double f1 = 0.0;
  for (double x : r.f1) f1 += x;
  EXPECT_EQ(r.macro_f1, f1 / 5.0);
  const auto back = metrics::report_from_json(metrics::to_json(r));
  EXPECT_EQ(back.accuracy, r.accuracy);
  EXPECT_EQ(back.confusion, r.confusion);
}

TEST(Wilcoxon, AllZeroDifferencesIsAnError) {
  EXPECT_THROW(metrics::wilcoxon_signed_rank({1, 2, 3, 4, 5}, {1, 2, 3, 4, 5}), DataError);
  EXPECT_THROW(metrics::wilcoxon_signed_rank({1, 2}, {1}), ShapeError);
}

TEST(Wilcoxon, AllPositiveFive) {
  const auto r = metrics::wilcoxon_signed_rank({1, 2, 3, 4, 5}, {0, 0, 0, 0, 0});
  EXPECT_EQ(r.statistic, 15.0);
  EXPECT_DOUBLE_EQ(r.p_value, 0.0625);
  EXPECT_TRUE(r.exact);
}

TEST(Wilcoxon, MixedSignsSixMatchesEnumeration) {
  const std::vector<double> d{1, -2, 3, -4, 5, 6};
  const auto r = metrics::wilcoxon_signed_rank(d, std::vector<double>(6, 0.0));
  const auto o = tmknet::testing::enumerate_wilcoxon(d);
  EXPECT_EQ(r.statistic, o.statistic);
  EXPECT_EQ(r.statistic, 15.0);
  EXPECT_DOUBLE_EQ(r.p_value, o.p_value);
}

TEST(Wilcoxon, ExhaustiveOracleWithTiesUpToTwelve) {
  Rng rng(12);
  for (std::size_t n = 1; n <= 12; ++n)
    for (int rep = 0; rep < 20; ++rep) {
      std::vector<double> d(n);
      for (double& x : d) x = static_cast<double>(static_cast<int>(rng.index(9)) - 4);  // ties and zeros
      if (std::all_of(d.begin(), d.end(), [](double x) { return x == 0.0; })) d[0] = 1.0;
      const auto r = metrics::wilcoxon_signed_rank(d, std::vector<double>(n, 0.0));
      const auto o = tmknet::testing::enumerate_wilcoxon(d);
      EXPECT_EQ(r.statistic, o.statistic);
      EXPECT_DOUBLE_EQ(r.p_value, o.p_value) << "n=" << n;
    }
}

TEST(Wilcoxon, NormalApproximationAboveTwentyFive) {
  std::vector<double> a, b;
  for (int i = 1; i <= 30; ++i) {
    a.push_back(i % 3 == 0 ? -i : i);
    b.push_back(0.0);
  }
  const auto r = metrics::wilcoxon_signed_rank(a, b);
  EXPECT_FALSE(r.exact);
  // W+ = 465 - sum of multiples of 3 up to 30 (165) = 300; mean 232.5, var 2363.75.
  EXPECT_EQ(r.statistic, 300.0);
  const double z = (300.0 - 232.5 - 0.5) / std::sqrt(2363.75);
  EXPECT_NEAR(r.p_value, std::erfc(z / std::sqrt(2.0)), 1e-14);
}
