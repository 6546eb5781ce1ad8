#ifndef TMKNET_METRICS_HPP
#define TMKNET_METRICS_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "tmknet/error.hpp"

namespace tmknet::metrics {

/// Counts indexed [true class][predicted class].
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t classes = 0) : n_(classes), counts_(classes * classes, 0) {}

  ConfusionMatrix(std::size_t classes, const std::vector<std::size_t>& truth, const std::vector<std::size_t>& predicted)
      : ConfusionMatrix(classes) {
    if (truth.size() != predicted.size()) throw ShapeError("confusion matrix: truth/prediction length mismatch");
    for (std::size_t i = 0; i < truth.size(); ++i) add(truth[i], predicted[i]);
  }

  void add(std::size_t truth, std::size_t predicted) {
    if (truth >= n_ || predicted >= n_) throw ShapeError("confusion matrix: class id out of range");
    ++counts_[truth * n_ + predicted];
  }

  std::size_t classes() const { return n_; }
  std::uint64_t at(std::size_t truth, std::size_t predicted) const { return counts_.at(truth * n_ + predicted); }
  std::uint64_t total() const { return std::accumulate(counts_.begin(), counts_.end(), std::uint64_t{0}); }

  std::uint64_t support(std::size_t k) const {
    std::uint64_t s = 0;
    for (std::size_t j = 0; j < n_; ++j) s += at(k, j);
    return s;
  }
  std::uint64_t predicted_count(std::size_t k) const {
    std::uint64_t s = 0;
    for (std::size_t i = 0; i < n_; ++i) s += at(i, k);
    return s;
  }

  double accuracy() const {
    const std::uint64_t t = total();
    if (t == 0) return 0.0;
    std::uint64_t diag = 0;
    for (std::size_t k = 0; k < n_; ++k) diag += at(k, k);
    return static_cast<double>(diag) / static_cast<double>(t);
  }

  double precision(std::size_t k) const {
    const std::uint64_t p = predicted_count(k);
    return p == 0 ? 0.0 : static_cast<double>(at(k, k)) / static_cast<double>(p);
  }
  double recall(std::size_t k) const {
    const std::uint64_t s = support(k);
    return s == 0 ? 0.0 : static_cast<double>(at(k, k)) / static_cast<double>(s);
  }
  /// Zero when precision + recall = 0.
  double f1(std::size_t k) const {
    const double p = precision(k), r = recall(k);
    return p + r == 0.0 ? 0.0 : 2.0 * p * r / (p + r);
  }
  /// Unweighted mean of per-class F1 over all classes.
  double macro_f1() const {
    if (n_ == 0) return 0.0;
    double s = 0.0;
    for (std::size_t k = 0; k < n_; ++k) s += f1(k);
    return s / static_cast<double>(n_);
  }

  std::vector<std::vector<std::uint64_t>> rows() const {
    std::vector<std::vector<std::uint64_t>> r(n_, std::vector<std::uint64_t>(n_));
    for (std::size_t i = 0; i < n_; ++i)
      for (std::size_t j = 0; j < n_; ++j) r[i][j] = at(i, j);
    return r;
  }

 private:
  std::size_t n_;
  std::vector<std::uint64_t> counts_;
};

struct MetricsReport {
  double accuracy = 0.0;
  double macro_f1 = 0.0;
  std::vector<double> precision;
  std::vector<double> recall;
  std::vector<double> f1;
  std::vector<std::vector<std::uint64_t>> confusion;
  std::vector<double> loss_curve;
  std::uint64_t seed = 0;
  std::string config_hash;
  std::size_t samples = 0;
};

inline MetricsReport report_from(const ConfusionMatrix& cm) {
  MetricsReport r;
  r.accuracy = cm.accuracy();
  r.macro_f1 = cm.macro_f1();
  for (std::size_t k = 0; k < cm.classes(); ++k) {
    r.precision.push_back(cm.precision(k));
    r.recall.push_back(cm.recall(k));
    r.f1.push_back(cm.f1(k));
  }
  r.confusion = cm.rows();
  r.samples = static_cast<std::size_t>(cm.total());
  return r;
}

inline nlohmann::json to_json(const MetricsReport& r) {
  return nlohmann::json{{"accuracy", r.accuracy},   {"macro_f1", r.macro_f1},      {"precision", r.precision},
                        {"recall", r.recall},       {"f1", r.f1},                  {"confusion_matrix", r.confusion},
                        {"loss_curve", r.loss_curve}, {"seed", r.seed},            {"config_hash", r.config_hash},
                        {"samples", r.samples}};
}

inline MetricsReport report_from_json(const nlohmann::json& j) {
  try {
    MetricsReport r;
    r.accuracy = j.at("accuracy").get<double>();
    r.macro_f1 = j.at("macro_f1").get<double>();
    r.precision = j.value("precision", std::vector<double>{});
    r.recall = j.value("recall", std::vector<double>{});
    r.f1 = j.value("f1", std::vector<double>{});
    r.confusion = j.value("confusion_matrix", std::vector<std::vector<std::uint64_t>>{});
    r.loss_curve = j.value("loss_curve", std::vector<double>{});
    r.seed = j.value("seed", std::uint64_t{0});
    r.config_hash = j.value("config_hash", std::string{});
    r.samples = j.value("samples", std::size_t{0});
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("metrics report: ") + e.what());
  }
}

struct WilcoxonResult {
  double statistic = 0.0;  ///< W+ (sum of ranks of positive differences)
  double p_value = 1.0;    ///< two-sided
  std::size_t n = 0;       ///< non-zero differences
  bool exact = true;
  double z = 0.0;          ///< normal-approximation score (0 for the exact path)
};

/// Largest n for which the null distribution is enumerated exactly.
inline constexpr std::size_t kWilcoxonExactMax = 25;

namespace detail {

/// Average ranks (1-based) of |d| with ties grouped; also returns tie-group sizes.
inline std::vector<double> signed_rank_ranks(const std::vector<double>& absd, std::vector<std::size_t>& tie_sizes) {
  const std::size_t n = absd.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return absd[a] < absd[b]; });
  std::vector<double> ranks(n);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i + 1;
    const double v = absd[order[i]];
    while (j < n && std::abs(absd[order[j]] - v) <= 1e-12 * std::max(1.0, v)) ++j;
    const double avg = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t k = i; k < j; ++k) ranks[order[k]] = avg;
    tie_sizes.push_back(j - i);
    i = j;
  }
  return ranks;
}

inline double normal_upper_tail(double z) { return 0.5 * std::erfc(z / std::sqrt(2.0)); }

}  // namespace detail

/// Two-sided Wilcoxon signed-rank test on paired scores. Exact null distribution
/// (ties handled via doubled ranks) for n <= 25, normal approximation with tie and
/// continuity corrections above.
inline WilcoxonResult wilcoxon_signed_rank(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw ShapeError("wilcoxon: paired samples differ in length");
  std::vector<double> d;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!std::isfinite(a[i]) || !std::isfinite(b[i])) throw DataError("wilcoxon: non-finite score");
    if (a[i] - b[i] != 0.0) d.push_back(a[i] - b[i]);
  }
  if (d.empty()) throw DataError("wilcoxon: all paired differences are zero");
  const std::size_t n = d.size();
  std::vector<double> absd(n);
  for (std::size_t i = 0; i < n; ++i) absd[i] = std::abs(d[i]);
  std::vector<std::size_t> ties;
  const std::vector<double> ranks = detail::signed_rank_ranks(absd, ties);

  WilcoxonResult res;
  res.n = n;
  for (std::size_t i = 0; i < n; ++i)
    if (d[i] > 0) res.statistic += ranks[i];

  if (n <= kWilcoxonExactMax) {
    // Doubled ranks are integers; count sign patterns by subset-sum DP.
    std::vector<std::size_t> r2(n);
    std::size_t total = 0;
    for (std::size_t i = 0; i < n; ++i) {
      r2[i] = static_cast<std::size_t>(std::llround(2.0 * ranks[i]));
      total += r2[i];
    }
    std::vector<double> ways(total + 1, 0.0);
    ways[0] = 1.0;
    for (std::size_t r : r2)
      for (std::size_t s = total + 1; s-- > r;) ways[s] += ways[s - r];
    const auto w2 = static_cast<std::size_t>(std::llround(2.0 * res.statistic));
    double lower = 0.0, upper = 0.0, all = 0.0;
    for (std::size_t s = 0; s <= total; ++s) {
      all += ways[s];
      if (s <= w2) lower += ways[s];
      if (s >= w2) upper += ways[s];
    }
    res.exact = true;
    res.p_value = std::min(1.0, 2.0 * std::min(lower, upper) / all);
    return res;
  }

  const double nn = static_cast<double>(n);
  const double mean = nn * (nn + 1.0) / 4.0;
  double var = nn * (nn + 1.0) * (2.0 * nn + 1.0) / 24.0;
  for (std::size_t t : ties) {
    const double tt = static_cast<double>(t);
    var -= (tt * tt * tt - tt) / 48.0;
  }
  res.exact = false;
  if (var <= 0.0) {
    res.p_value = 1.0;
    return res;
  }
  const double dev = std::max(0.0, std::abs(res.statistic - mean) - 0.5);
  res.z = dev / std::sqrt(var) * (res.statistic >= mean ? 1.0 : -1.0);
  res.p_value = std::min(1.0, 2.0 * detail::normal_upper_tail(dev / std::sqrt(var)));
  return res;
}

}  // namespace tmknet::metrics

#endif  // TMKNET_METRICS_HPP
