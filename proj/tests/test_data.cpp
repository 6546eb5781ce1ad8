#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "test_support.hpp"
#include "tmknet/data.hpp"
#include "tmknet/error.hpp"
#include "tmknet/spd.hpp"

using namespace tmknet;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("tmknet_test_data_" + name);
  fs::remove_all(p);
  return p;
}

data::SynthSpec small_spec(std::uint64_t seed) {
  data::SynthSpec s;
  s.classes = 4;
  s.sensors = 8;
  s.domains = 3;
  s.trials_per_cell = 12;
  s.seed = seed;
  return s;
}

/// Sample covariance of a (c, t) trial with divisor t - 1 plus a small ridge.
Tensor trial_cov(const data::Dataset& ds, std::size_t i) {
  const std::size_t c = ds.manifest.sensors, t = ds.samples_per_trial();
  const auto& sig = ds.trials[i].signal;
  Tensor cov({c, c});
  for (std::size_t a = 0; a < c; ++a)
    for (std::size_t b = 0; b < c; ++b) {
      double ma = 0, mb = 0, s = 0;
      for (std::size_t k = 0; k < t; ++k) {
        ma += sig[a * t + k];
        mb += sig[b * t + k];
      }
      ma /= t;
      mb /= t;
      for (std::size_t k = 0; k < t; ++k) s += (sig[a * t + k] - ma) * (sig[b * t + k] - mb);
      cov.at(a, b) = s / static_cast<double>(t - 1);
    }
  for (std::size_t a = 0; a < c; ++a) cov.at(a, a) += 1e-6;
  return cov;
}

}  // namespace

TEST(Window, HopArithmetic) {
  Tensor stream({2, 1000});
  for (std::size_t i = 0; i < 1000; ++i) stream.at(0, i) = static_cast<double>(i);
  const auto segs = data::window(stream, 2000.0, 200.0, 100.0);
  ASSERT_EQ(segs.size(), 4u);
  for (std::size_t s = 0; s < 4; ++s) {
    EXPECT_EQ(segs[s].shape(), (Shape{2, 400}));
    EXPECT_EQ(segs[s].at(0, 0), static_cast<double>(200 * s));
  }
  EXPECT_EQ(data::window(Tensor({2, 400}), 2000.0, 200.0, 100.0).size(), 1u);
  EXPECT_THROW(data::window(Tensor({2, 399}), 2000.0, 200.0, 100.0), DataError);
}

TEST(Window, SegmentsDoNotShareStorage) {
  Tensor stream({1, 10}, 1.0);
  auto segs = data::window(stream, 1000.0, 4.0, 2.0);
  segs[0].at(0, 2) = 42.0;
  EXPECT_EQ(segs[1].at(0, 0), 1.0);
}

TEST(Hampel, Examples) {
  const std::vector<double> flat(20, 3.0);
  EXPECT_EQ(data::hampel(flat, 3, 3.0), flat);
  std::vector<double> spike(15, 0.0);
  spike[7] = 100.0;
  const auto f = data::hampel(spike, 3, 3.0);
  EXPECT_EQ(f, std::vector<double>(15, 0.0));
  std::vector<double> ramp(10);
  for (int i = 0; i < 10; ++i) ramp[i] = i;
  EXPECT_EQ(data::hampel(ramp, 3, 3.0), ramp);
  EXPECT_THROW(data::hampel(ramp, 0, 3.0), ConfigError);
  EXPECT_EQ(data::default_hampel_half_window(2000.0), 20u);
  EXPECT_EQ(data::default_hampel_half_window(50.0), 1u);
}

TEST(Zscore, Examples) {
  EXPECT_EQ(data::zscore(Tensor::matrix(1, 2, {0, 2})), Tensor::matrix(1, 2, {-1, 1}));
  EXPECT_EQ(data::zscore(Tensor::matrix(1, 3, {5, 5, 5})), Tensor::matrix(1, 3, {0, 0, 0}));
  const Tensor z = Tensor::matrix(1, 4, {-1, 1, -1, 1});
  EXPECT_LE(max_abs_diff(data::zscore(z), z), 1e-12);
  Rng rng(3);
  const Tensor out = data::zscore(rng.normal_tensor({3, 50}) * 4.0);
  for (std::size_t c = 0; c < 3; ++c) {
    double m = 0, v = 0;
    for (std::size_t j = 0; j < 50; ++j) m += out.at(c, j);
    for (std::size_t j = 0; j < 50; ++j) v += out.at(c, j) * out.at(c, j);
    EXPECT_NEAR(m / 50, 0.0, 1e-12);
    EXPECT_NEAR(v / 50, 1.0, 1e-12);
  }
}

TEST(Pipeline, DeterministicAndCountMatchesHopFormula) {
  Rng rng(4);
  const Tensor stream = rng.normal_tensor({4, 2345});
  const data::PreprocessConfig cfg{1000.0, 200.0, 100.0, 0, 3.0};
  const auto a = data::preprocess(stream, cfg);
  const auto b = data::preprocess(stream, cfg);
  EXPECT_EQ(a.size(), (2345u - 200u) / 100u + 1u);
  EXPECT_EQ(a, b);
}

TEST(Split, LeaveOneSessionOut) {
  data::DatasetManifest m;
  m.domains = {{1, 1}, {1, 2}, {1, 3}, {2, 1}};
  const auto p = data::make_split(m, 1, 2);
  EXPECT_EQ(p.target_domain, 1u);
  EXPECT_EQ(p.source_domains, (std::vector<std::size_t>{0, 2}));
  EXPECT_THROW(data::make_split(m, 1, 9), ConfigError);
  EXPECT_THROW(data::make_split(m, 2, 1), ConfigError);
}

TEST(Sampler, BalancedBatchesAndDeterminism) {
  std::map<std::size_t, std::vector<std::size_t>> pools;
  for (std::size_t d = 0; d < 6; ++d)
    for (std::size_t i = 0; i < 30; ++i) pools[d].push_back(d * 100 + i);
  data::BatchSampler s1(pools, 50, 5, 7), s2(pools, 50, 5, 7);
  std::set<int> visited;
  for (int it = 0; it < 6; ++it) {
    const auto b1 = s1.next(), b2 = s2.next();
    EXPECT_EQ(b1.trials, b2.trials);
    ASSERT_EQ(b1.trials.size(), 50u);
    std::map<int, int> per;
    for (std::size_t k = 0; k < 50; ++k) {
      ++per[b1.domains[k]];
      EXPECT_EQ(static_cast<int>(b1.trials[k] / 100), b1.domains[k]);
      visited.insert(b1.domains[k]);
    }
    EXPECT_EQ(per.size(), 5u);
    for (const auto& [d, n] : per) EXPECT_EQ(n, 10);
  }
  EXPECT_EQ(visited.size(), 6u);
  data::BatchSampler single(pools, 50, 1, 1);
  const auto b = single.next();
  EXPECT_TRUE(std::all_of(b.domains.begin(), b.domains.end(), [&](int d) { return d == b.domains[0]; }));
  EXPECT_THROW(data::BatchSampler(pools, 50, 7, 1), ConfigError);
  EXPECT_THROW(data::BatchSampler(pools, 50, 3, 1), ConfigError);
}

TEST(Synth, ReproducibleBitForBit) {
  const auto a = data::synth_generate(small_spec(5));
  const auto b = data::synth_generate(small_spec(5));
  EXPECT_EQ(a, b);
  const auto c = data::synth_generate(small_spec(6));
  EXPECT_NE(a.trials[0].signal, c.trials[0].signal);
}

TEST(Synth, BalancedLabelsAndValidManifest) {
  const auto ds = data::synth_generate(small_spec(1));
  EXPECT_NO_THROW(data::validate(ds));
  EXPECT_EQ(ds.trials.size(), 3u * 4u * 12u);
  std::map<std::size_t, int> per;
  for (const auto& t : ds.trials) ++per[t.label];
  for (const auto& [k, n] : per) EXPECT_EQ(n, 36);
  EXPECT_EQ(ds.manifest.flexor_ids.size(), 4u);
  EXPECT_EQ(ds.manifest.proximal_ids.size() + ds.manifest.distal_ids.size(), 8u);
}

TEST(Synth, DomainShiftSeparatesDomainMeans) {
  const auto ds = data::synth_generate(small_spec(2));
  std::vector<Tensor> means;
  for (std::size_t d = 0; d < 3; ++d) {
    std::vector<Tensor> covs;
    for (std::size_t i : ds.indices_of_domain(d)) covs.push_back(trial_cov(ds, i));
    means.push_back(spd::karcher_mean(covs));
  }
  double total = 0;
  int pairs = 0;
  for (std::size_t a = 0; a < 3; ++a)
    for (std::size_t b = a + 1; b < 3; ++b, ++pairs) total += spd::airm_dist(means[a], means[b]);
  EXPECT_GT(total / pairs, 0.1);
}

TEST(Synth, SingleDomainTwoClassCovarianceClassifier) {
  // Log-covariance + logistic regression trained by plain gradient descent.
  data::SynthSpec s = small_spec(3);
  s.domains = 1;
  s.classes = 2;
  s.trials_per_cell = 60;
  const auto ds = data::synth_generate(s);
  std::vector<std::vector<double>> feats;
  std::vector<double> y;
  for (std::size_t i = 0; i < ds.trials.size(); ++i) {
    const Tensor l = sym_fn(trial_cov(ds, i), SpectralFn::log());
    feats.emplace_back(l.data().begin(), l.data().end());
    y.push_back(static_cast<double>(ds.trials[i].label));
  }
  const std::size_t dim = feats[0].size();
  std::vector<double> w(dim, 0.0);
  double bias = 0.0;
  for (int it = 0; it < 500; ++it) {
    std::vector<double> gw(dim, 0.0);
    double gb = 0.0;
    for (std::size_t i = 0; i < feats.size(); ++i) {
      double z = bias;
      for (std::size_t k = 0; k < dim; ++k) z += w[k] * feats[i][k];
      const double p = 1.0 / (1.0 + std::exp(-z));
      for (std::size_t k = 0; k < dim; ++k) gw[k] += (p - y[i]) * feats[i][k];
      gb += p - y[i];
    }
    for (std::size_t k = 0; k < dim; ++k) w[k] -= 0.05 * gw[k] / feats.size();
    bias -= 0.05 * gb / feats.size();
  }
  int correct = 0;
  for (std::size_t i = 0; i < feats.size(); ++i) {
    double z = bias;
    for (std::size_t k = 0; k < dim; ++k) z += w[k] * feats[i][k];
    correct += (z > 0) == (y[i] > 0.5);
  }
  EXPECT_GT(static_cast<double>(correct) / feats.size(), 0.95);
}

TEST(Synth, RejectsInvalidSpec) {
  data::SynthSpec s = small_spec(1);
  s.sensors = 7;
  EXPECT_THROW(data::synth_generate(s), ConfigError);
  s = small_spec(1);
  s.shift = 1.0;
  EXPECT_THROW(data::synth_generate(s), ConfigError);
}

TEST(StoreIo, RoundTripIsBitExact) {
  const auto ds = data::synth_generate(small_spec(9));
  const fs::path dir = scratch("roundtrip");
  data::write_dataset(ds, dir);
  const auto back = data::read_dataset(dir);
  EXPECT_EQ(back.manifest, ds.manifest);
  EXPECT_EQ(back.trials, ds.trials);
  fs::remove_all(dir);
}

TEST(StoreIo, TruncatedTensorFileIsLengthMismatch) {
  const auto ds = data::synth_generate(small_spec(9));
  const fs::path dir = scratch("truncated");
  data::write_dataset(ds, dir);
  fs::resize_file(dir / "trials.f32", fs::file_size(dir / "trials.f32") - 4);
  try {
    data::read_dataset(dir);
    FAIL() << "expected a length mismatch";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("length mismatch"), std::string::npos);
  }
  fs::remove_all(dir);
}

TEST(StoreIo, UnknownVersionAndCorruptHeader) {
  const auto ds = data::synth_generate(small_spec(9));
  const fs::path dir = scratch("version");
  data::write_dataset(ds, dir);
  nlohmann::json j;
  std::ifstream(dir / "manifest.json") >> j;
  j["format_version"] = 7;
  std::ofstream(dir / "manifest.json") << j.dump();
  try {
    data::read_dataset(dir);
    FAIL() << "expected a version error";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("format_version 7"), std::string::npos);
  }
  std::ofstream(dir / "manifest.json") << "{ not json";
  EXPECT_THROW(data::read_dataset(dir), DataError);
  fs::remove_all(dir);
}
