#ifndef TMKNET_STEM_HPP
#define TMKNET_STEM_HPP

#include <algorithm>
#include <cmath>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "tmknet/autodiff.hpp"
#include "tmknet/error.hpp"
#include "tmknet/tensor.hpp"

/// Euclidean stem: multi-resolution temporal (MRT) and multi-scale spatial (MSS) layers.
namespace tmknet::stem {

using ad::Var;

/// Which stem branches are active. The defaults are the full architecture.
struct StemVariant {
  bool multi_resolution = true;  ///< false keeps only the first temporal kernel
  bool global = true;
  bool flexor = true;
  bool extensor = true;
  bool proximal_distal = true;
  bool dilated = true;

  bool operator==(const StemVariant&) const = default;
};

struct StemConfig {
  double fs = 2000.0;
  double r_data = 0.2;
  std::vector<double> r_resolution{1.0 / 16, 1.0 / 32, 1.0 / 64};
  std::size_t n_t = 64;
  std::size_t n_s = 40;
  std::size_t pool_size = 4;
  double leaky_slope = 0.01;
  std::size_t sensors = 0;
  std::vector<std::size_t> flexor_ids;
  std::vector<std::size_t> extensor_ids;
  std::vector<std::size_t> proximal_ids;
  std::vector<std::size_t> distal_ids;
  StemVariant variant;
};

/// floor(r_data * r_resolution * fs), at least 1. Errors if it exceeds `window` samples.
inline std::size_t temporal_kernel_size(double fs, double r_data, double r_resolution,
                                        std::optional<std::size_t> window = std::nullopt) {
  if (!(fs > 0.0)) throw ConfigError("temporal_kernel_size: Fs must be positive");
  if (!(r_data > 0.0 && r_data <= 1.0) || !(r_resolution > 0.0 && r_resolution <= 1.0))
    throw ConfigError("temporal_kernel_size: ratios must lie in (0,1]");
  // The small offset keeps products like 2000 * 0.2 / 16 = 24.999... from flooring down.
  const double raw = r_data * r_resolution * fs;
  const auto k = std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(raw + 1e-9)));
  if (window && k > *window)
    throw ConfigError("temporal kernel of " + std::to_string(k) + " samples exceeds the window of " +
                      std::to_string(*window) + " samples");
  return k;
}

inline std::vector<std::size_t> temporal_kernels(const StemConfig& cfg) {
  std::vector<std::size_t> ks;
  const std::size_t count = cfg.variant.multi_resolution ? cfg.r_resolution.size() : std::min<std::size_t>(1, cfg.r_resolution.size());
  for (std::size_t i = 0; i < count; ++i) ks.push_back(temporal_kernel_size(cfg.fs, cfg.r_data, cfg.r_resolution[i]));
  return ks;
}

/// Time length after MRT: sum_i floor((t - k_i + 1) / pool).
inline std::size_t mrt_output_length(const StemConfig& cfg, std::size_t t) {
  std::size_t total = 0;
  for (std::size_t k : temporal_kernels(cfg)) {
    if (k > t) throw ConfigError("MRT kernel of " + std::to_string(k) + " samples exceeds input length " + std::to_string(t));
    total += (t - k + 1) / cfg.pool_size;
  }
  return total;
}

/// Spatial length after MSS: 1 + 1 + 1 + 2 + c/2 for the full layer.
inline std::size_t mss_output_sensors(const StemConfig& cfg) {
  const std::size_t half = cfg.sensors / 2;
  const StemVariant& v = cfg.variant;
  return (v.global ? 1 : 0) + (v.flexor ? 1 : 0) + (v.extensor ? 1 : 0) + (v.proximal_distal ? 2 : 0) + (v.dilated ? half : 0);
}

inline void validate(const StemConfig& cfg, std::optional<std::size_t> window = std::nullopt) {
  const std::size_t c = cfg.sensors;
  if (c == 0 || c % 2 != 0) throw ConfigError("stem: sensor count must be positive and even, got " + std::to_string(c));
  if (cfg.r_resolution.empty()) throw ConfigError("stem: r_resolution is empty");
  if (cfg.n_t == 0 || cfg.n_s == 0 || cfg.pool_size == 0) throw ConfigError("stem: n_t, n_s and pool_size must be positive");
  const std::size_t half = c / 2;
  auto check_list = [&](const std::vector<std::size_t>& ids, const char* name) {
    if (ids.size() != half)
      throw ConfigError(std::string("stem: ") + name + " must list c/2 = " + std::to_string(half) + " sensors, got " +
                        std::to_string(ids.size()));
    std::set<std::size_t> uniq(ids.begin(), ids.end());
    if (uniq.size() != ids.size()) throw ConfigError(std::string("stem: duplicate index in ") + name);
    for (std::size_t i : ids)
      if (i >= c) throw ConfigError(std::string("stem: ") + name + " index " + std::to_string(i) + " out of range");
  };
  check_list(cfg.flexor_ids, "flexor_ids");
  check_list(cfg.extensor_ids, "extensor_ids");
  check_list(cfg.proximal_ids, "proximal_ids");
  check_list(cfg.distal_ids, "distal_ids");
  std::set<std::size_t> pd(cfg.proximal_ids.begin(), cfg.proximal_ids.end());
  pd.insert(cfg.distal_ids.begin(), cfg.distal_ids.end());
  if (pd.size() != c) throw ConfigError("stem: proximal_ids and distal_ids must together cover every sensor");
  if (mss_output_sensors(cfg) == 0) throw ConfigError("stem: every MSS branch is disabled");
  for (double r : cfg.r_resolution) temporal_kernel_size(cfg.fs, cfg.r_data, r, window);
  if (window && mrt_output_length(cfg, *window) == 0) throw ConfigError("stem: pooled MRT output is empty");
}

/// Per-channel batch normalization over axis 1 with running statistics.
struct EuclidBatchNorm {
  std::vector<double> running_mean;
  std::vector<double> running_var;
  bool initialized = false;
  double momentum = 0.1;
  double eps = 1e-5;

  explicit EuclidBatchNorm(std::size_t channels = 0)
      : running_mean(channels, 0.0), running_var(channels, 1.0) {}

  /// Training mode normalizes with batch statistics and folds them into the running ones.
  Var forward(const Var& x, const Var& gamma, const Var& beta, bool training) {
    if (training) {
      if (!x.value().empty() && x.value().dim(0) < 2) throw ShapeError("batch norm: training needs a batch of at least 2");
      ad::ChannelStats st;
      Var y = ad::batch_norm_train(x, gamma, beta, eps, &st);
      for (std::size_t c = 0; c < running_mean.size(); ++c) {
        running_mean[c] = (1.0 - momentum) * running_mean[c] + momentum * st.mean[c];
        running_var[c] = (1.0 - momentum) * running_var[c] + momentum * st.var_unbiased[c];
      }
      initialized = true;
      return y;
    }
    if (!initialized) throw StateError("batch norm: evaluation before any training update");
    return ad::batch_norm_eval(x, gamma, beta, running_mean, running_var, eps);
  }
};

struct MrtWeights {
  std::vector<Var> kernels;  ///< (n_t, 1, 1, k_i)
  std::vector<Var> biases;   ///< (n_t)
  Var bn_gamma, bn_beta;     ///< (n_t)
};

/// x (b,1,c,t) -> (b, n_t, c, t_t): per-branch time convolution, LeakyReLU and
/// max pooling, concatenated along time, then batch norm.
inline Var mrt_forward(const Var& x, const StemConfig& cfg, const MrtWeights& w, EuclidBatchNorm& bn, bool training) {
  const Tensor& xv = x.value();
  if (xv.rank() != 4 || xv.dim(1) != 1) throw ShapeError("mrt_forward: expected (b,1,c,t), got " + shape_str(xv.shape()));
  const auto ks = temporal_kernels(cfg);
  if (w.kernels.size() != ks.size() || w.biases.size() != ks.size()) throw ShapeError("mrt_forward: branch count mismatch");
  std::vector<Var> branches;
  for (std::size_t i = 0; i < ks.size(); ++i) {
    if (ks[i] > xv.dim(3))
      throw ShapeError("mrt_forward: kernel of " + std::to_string(ks[i]) + " samples exceeds t = " + std::to_string(xv.dim(3)));
    if (w.kernels[i].shape() != Shape{cfg.n_t, 1, 1, ks[i]}) throw ShapeError("mrt_forward: kernel shape mismatch");
    Var z = ad::conv2d(x, w.kernels[i], w.biases[i]);
    z = ad::leaky_relu(z, cfg.leaky_slope);
    branches.push_back(ad::max_pool_last(z, cfg.pool_size));
  }
  Var stacked = branches.size() == 1 ? branches[0] : ad::concat(branches, 3);
  return bn.forward(stacked, w.bn_gamma, w.bn_beta, training);
}

struct MssWeights {
  Var global_w, global_b;      ///< (n_s, n_t, c, 1)
  Var flexor_w, flexor_b;      ///< (n_s, n_t, c/2, 1)
  Var extensor_w, extensor_b;  ///< (n_s, n_t, c/2, 1)
  Var pd_w, pd_b;              ///< (n_s, n_t, c/2, 1), stride c/2
  Var dilated_w, dilated_b;    ///< (n_s, n_t, 2, 1), dilation c/2
  Var bn_gamma, bn_beta;       ///< (n_s)
};

/// z (b, n_t, c, t_t) -> (b, n_s, c_s, t_t) with c_s = 5 + c/2 for the full layer.
inline Var mss_forward(const Var& z, const StemConfig& cfg, const MssWeights& w, EuclidBatchNorm& bn, bool training) {
  const Tensor& zv = z.value();
  const std::size_t c = cfg.sensors;
  if (zv.rank() != 4 || zv.dim(2) != c) throw ShapeError("mss_forward: expected (b,n_t,c,t), got " + shape_str(zv.shape()));
  if (c % 2 != 0) throw ConfigError("mss_forward: odd sensor count");
  const std::size_t half = c / 2;
  const StemVariant& v = cfg.variant;
  std::vector<Var> parts;
  auto act = [&](const Var& y) { return ad::leaky_relu(y, cfg.leaky_slope); };
  if (v.global) parts.push_back(act(ad::conv2d(z, w.global_w, w.global_b)));
  if (v.flexor) parts.push_back(act(ad::conv2d(ad::index_select(z, 2, cfg.flexor_ids), w.flexor_w, w.flexor_b)));
  if (v.extensor) parts.push_back(act(ad::conv2d(ad::index_select(z, 2, cfg.extensor_ids), w.extensor_w, w.extensor_b)));
  if (v.proximal_distal) {
    std::vector<std::size_t> order = cfg.proximal_ids;
    order.insert(order.end(), cfg.distal_ids.begin(), cfg.distal_ids.end());
    ad::Conv2dParams cp;
    cp.stride_h = half;
    parts.push_back(act(ad::conv2d(ad::index_select(z, 2, order), w.pd_w, w.pd_b, cp)));
  }
  if (v.dilated) {
    ad::Conv2dParams cp;
    cp.dilation_h = half;
    parts.push_back(act(ad::conv2d(z, w.dilated_w, w.dilated_b, cp)));
  }
  if (parts.empty()) throw ConfigError("mss_forward: every branch is disabled");
  Var stacked = parts.size() == 1 ? parts[0] : ad::concat(parts, 2);
  return bn.forward(stacked, w.bn_gamma, w.bn_beta, training);
}

}  // namespace tmknet::stem

#endif  // TMKNET_STEM_HPP
