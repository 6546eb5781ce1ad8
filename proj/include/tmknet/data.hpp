#ifndef TMKNET_DATA_HPP
#define TMKNET_DATA_HPP

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "tmknet/error.hpp"
#include "tmknet/linalg.hpp"
#include "tmknet/random.hpp"
#include "tmknet/tensor.hpp"

namespace tmknet::data {

inline constexpr int kFormatVersion = 1;

struct Domain {
  int subject = 1;
  int session = 1;
  bool operator==(const Domain&) const = default;
};

struct DatasetManifest {
  std::string name;
  double fs = 0.0;
  std::size_t sensors = 0;
  std::vector<std::string> class_names;
  std::vector<Domain> domains;
  std::vector<std::size_t> flexor_ids, extensor_ids, proximal_ids, distal_ids;
  double window_ms = 0.0;
  double overlap_ms = 0.0;
  std::string provenance;

  std::size_t classes() const { return class_names.size(); }
  std::size_t window_samples() const { return static_cast<std::size_t>(std::llround(window_ms * fs / 1000.0)); }
  std::size_t overlap_samples() const { return static_cast<std::size_t>(std::llround(overlap_ms * fs / 1000.0)); }

  /// Index of (subject, session) in `domains`, or -1.
  int domain_index(int subject, int session) const {
    for (std::size_t i = 0; i < domains.size(); ++i)
      if (domains[i].subject == subject && domains[i].session == session) return static_cast<int>(i);
    return -1;
  }

  bool operator==(const DatasetManifest&) const = default;
};

inline void validate(const DatasetManifest& m) {
  if (!(m.fs > 0.0)) throw DataError("manifest: Fs must be positive");
  if (m.sensors == 0) throw DataError("manifest: sensor count must be positive");
  if (m.class_names.size() < 2) throw DataError("manifest: need at least two classes");
  if (m.domains.empty()) throw DataError("manifest: no domains");
  if (!(m.window_ms > m.overlap_ms && m.overlap_ms > 0.0)) throw DataError("manifest: need window_ms > overlap_ms > 0");
  if (m.window_samples() == 0) throw DataError("manifest: window shorter than one sample");
  std::set<std::pair<int, int>> seen;
  for (const Domain& d : m.domains)
    if (!seen.insert({d.subject, d.session}).second)
      throw DataError("manifest: duplicate domain (" + std::to_string(d.subject) + ", " + std::to_string(d.session) + ")");
  for (const auto* ids : {&m.flexor_ids, &m.extensor_ids, &m.proximal_ids, &m.distal_ids})
    for (std::size_t i : *ids)
      if (i >= m.sensors) throw DataError("manifest: muscle-group index " + std::to_string(i) + " out of range");
}

struct Trial {
  std::vector<float> signal;  ///< sensors x samples, row-major
  std::size_t label = 0;
  std::size_t domain = 0;  ///< index into manifest.domains
  std::uint64_t id = 0;

  bool operator==(const Trial&) const = default;
};

struct Dataset {
  DatasetManifest manifest;
  std::vector<Trial> trials;

  std::size_t samples_per_trial() const { return manifest.window_samples(); }

  /// Trial signal as a (1, 1, c, t) double tensor.
  Tensor input(std::size_t i) const {
    const Trial& tr = trials.at(i);
    Tensor t({1, 1, manifest.sensors, samples_per_trial()});
    for (std::size_t k = 0; k < tr.signal.size(); ++k) t[k] = tr.signal[k];
    return t;
  }

  /// Stacked (b, 1, c, t) input for the given trial indices.
  Tensor inputs(const std::vector<std::size_t>& idx) const {
    const std::size_t c = manifest.sensors, t = samples_per_trial();
    Tensor out({idx.size(), 1, c, t});
    for (std::size_t b = 0; b < idx.size(); ++b) {
      const Trial& tr = trials.at(idx[b]);
      for (std::size_t k = 0; k < c * t; ++k) out[b * c * t + k] = tr.signal[k];
    }
    return out;
  }

  std::vector<std::size_t> indices_of_domain(std::size_t domain) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < trials.size(); ++i)
      if (trials[i].domain == domain) out.push_back(i);
    return out;
  }

  bool operator==(const Dataset&) const = default;
};

inline void validate(const Dataset& ds) {
  validate(ds.manifest);
  const std::size_t len = ds.manifest.sensors * ds.samples_per_trial();
  for (const Trial& t : ds.trials) {
    if (t.signal.size() != len)
      throw DataError("trial " + std::to_string(t.id) + ": expected " + std::to_string(len) + " values, got " + std::to_string(t.signal.size()));
    if (t.label >= ds.manifest.classes()) throw DataError("trial " + std::to_string(t.id) + ": label out of range");
    if (t.domain >= ds.manifest.domains.size()) throw DataError("trial " + std::to_string(t.id) + ": domain out of range");
    for (float v : t.signal)
      if (!std::isfinite(v)) throw DataError("trial " + std::to_string(t.id) + ": non-finite sample");
  }
}

// ---------------------------------------------------------------------------
// Preprocessing

/// Splits a (c, T) stream into (c, w) segments with hop w - overlap.
inline std::vector<Tensor> window(const Tensor& stream, double fs, double window_ms, double overlap_ms) {
  require_matrix(stream, "window");
  const auto w = static_cast<std::size_t>(std::llround(window_ms * fs / 1000.0));
  const auto o = static_cast<std::size_t>(std::llround(overlap_ms * fs / 1000.0));
  if (w == 0 || o >= w) throw ConfigError("window: need window > overlap >= 0 samples");
  const std::size_t c = stream.dim(0), total = stream.dim(1);
  if (total < w)
    throw DataError("window: stream of " + std::to_string(total) + " samples is shorter than one window of " + std::to_string(w));
  const std::size_t hop = w - o;
  const std::size_t count = (total - w) / hop + 1;
  std::vector<Tensor> out;
  out.reserve(count);
  for (std::size_t s = 0; s < count; ++s) {
    Tensor seg({c, w});
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t j = 0; j < w; ++j) seg.at(ch, j) = stream.at(ch, s * hop + j);
    out.push_back(std::move(seg));
  }
  return out;
}

namespace detail {
inline double median_of(std::vector<double> v) {
  const std::size_t n = v.size();
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(n / 2), v.end());
  const double hi = v[n / 2];
  if (n % 2 == 1) return hi;
  return 0.5 * (hi + *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(n / 2)));
}
}  // namespace detail

/// Replaces x_i by the local median when |x_i - median| > n_sigma * 1.4826 * MAD
/// over the edge-clipped window [i - hw, i + hw].
inline std::vector<double> hampel(std::span<const double> x, std::size_t half_window, double n_sigma) {
  if (half_window < 1) throw ConfigError("hampel: half window must be at least 1");
  const std::size_t n = x.size();
  std::vector<double> out(x.begin(), x.end());
  std::vector<double> buf;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t lo = i >= half_window ? i - half_window : 0;
    const std::size_t hi = std::min(n - 1, i + half_window);
    buf.assign(x.begin() + static_cast<std::ptrdiff_t>(lo), x.begin() + static_cast<std::ptrdiff_t>(hi + 1));
    const double med = detail::median_of(buf);
    for (double& v : buf) v = std::abs(v - med);
    const double sigma = 1.4826 * detail::median_of(buf);
    if (std::abs(x[i] - med) > n_sigma * sigma) out[i] = med;
  }
  return out;
}

inline std::size_t default_hampel_half_window(double fs) {
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(fs / 100.0)));
}

/// Per-channel standardization (population variance, floored at 1e-8).
inline Tensor zscore(const Tensor& trial) {
  require_matrix(trial, "zscore");
  const std::size_t c = trial.dim(0), t = trial.dim(1);
  Tensor out(trial.shape());
  for (std::size_t ch = 0; ch < c; ++ch) {
    double mu = 0.0;
    for (std::size_t j = 0; j < t; ++j) mu += trial.at(ch, j);
    mu /= static_cast<double>(t);
    double var = 0.0;
    for (std::size_t j = 0; j < t; ++j) var += (trial.at(ch, j) - mu) * (trial.at(ch, j) - mu);
    var = std::max(var / static_cast<double>(t), 1e-8);
    const double is = 1.0 / std::sqrt(var);
    for (std::size_t j = 0; j < t; ++j) out.at(ch, j) = (trial.at(ch, j) - mu) * is;
  }
  return out;
}

struct PreprocessConfig {
  double fs = 2000.0;
  double window_ms = 200.0;
  double overlap_ms = 100.0;
  std::size_t hampel_half_window = 0;  ///< 0 selects max(1, round(Fs/100))
  double hampel_sigma = 3.0;
};

/// window -> hampel (per channel) -> zscore.
inline std::vector<Tensor> preprocess(const Tensor& stream, const PreprocessConfig& cfg) {
  const std::size_t hw = cfg.hampel_half_window ? cfg.hampel_half_window : default_hampel_half_window(cfg.fs);
  std::vector<Tensor> segs = window(stream, cfg.fs, cfg.window_ms, cfg.overlap_ms);
  for (Tensor& seg : segs) {
    const std::size_t c = seg.dim(0), t = seg.dim(1);
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::vector<double> f = hampel(std::span<const double>(seg.data().data() + ch * t, t), hw, cfg.hampel_sigma);
      std::copy(f.begin(), f.end(), seg.data().begin() + static_cast<std::ptrdiff_t>(ch * t));
    }
    seg = zscore(seg);
  }
  return segs;
}

// ---------------------------------------------------------------------------
// Splits and sampling

struct SplitPlan {
  int subject = 1;
  int target_session = 1;
  std::size_t target_domain = 0;
  std::vector<std::size_t> source_domains;
};

/// Leave-one-session-out: every other session of the subject is a source domain.
inline SplitPlan make_split(const DatasetManifest& m, int subject, int target_session) {
  SplitPlan p{subject, target_session, 0, {}};
  const int t = m.domain_index(subject, target_session);
  if (t < 0)
    throw ConfigError("split: no domain for subject " + std::to_string(subject) + ", session " + std::to_string(target_session));
  p.target_domain = static_cast<std::size_t>(t);
  for (std::size_t i = 0; i < m.domains.size(); ++i)
    if (m.domains[i].subject == subject && static_cast<int>(i) != t) p.source_domains.push_back(i);
  if (p.source_domains.empty()) throw ConfigError("split: subject " + std::to_string(subject) + " has no source sessions");
  return p;
}

struct Batch {
  std::vector<std::size_t> trials;
  std::vector<int> domains;
};

/// Domain-balanced batches: each batch takes `domains_per_batch` distinct domains
/// (cycling a shuffled domain order so every domain is visited each epoch) and
/// batch/domains_per_batch trials from each, drawn without replacement from a
/// per-domain pool that is reshuffled and refilled when exhausted.
class BatchSampler {
 public:
  BatchSampler(std::map<std::size_t, std::vector<std::size_t>> pools, std::size_t batch_size, std::size_t domains_per_batch,
               std::uint64_t seed)
      : pools_(std::move(pools)), batch_(batch_size), per_batch_(domains_per_batch), rng_(seed) {
    if (per_batch_ == 0 || batch_ == 0) throw ConfigError("sampler: batch size and domains per batch must be positive");
    if (batch_ % per_batch_ != 0)
      throw ConfigError("sampler: batch size " + std::to_string(batch_) + " not divisible by domains per batch " +
                        std::to_string(per_batch_));
    std::size_t usable = 0;
    for (auto& [d, pool] : pools_) {
      if (pool.empty()) continue;
      ++usable;
      domain_ids_.push_back(d);
      cursor_[d] = pool.size();
    }
    if (per_batch_ > usable)
      throw ConfigError("sampler: " + std::to_string(per_batch_) + " domains per batch but only " + std::to_string(usable) + " available");
    domain_cursor_ = domain_ids_.size();
  }

  std::size_t per_domain() const { return batch_ / per_batch_; }

  /// Batches needed to visit every trial about once, and every domain at least once.
  std::size_t batches_per_epoch() const {
    std::size_t total = 0;
    for (const auto& [d, pool] : pools_) total += pool.size();
    const std::size_t cover = (domain_ids_.size() + per_batch_ - 1) / per_batch_;
    return std::max({std::size_t{1}, (total + batch_ - 1) / batch_, cover});
  }

  Batch next() {
    Batch b;
    std::vector<std::size_t> chosen;
    while (chosen.size() < per_batch_) {
      if (domain_cursor_ >= domain_order_.size()) {
        domain_order_ = domain_ids_;
        rng_.shuffle(domain_order_);
        domain_cursor_ = 0;
      }
      const std::size_t d = domain_order_[domain_cursor_++];
      if (std::find(chosen.begin(), chosen.end(), d) == chosen.end()) chosen.push_back(d);
    }
    for (std::size_t d : chosen)
      for (std::size_t k = 0; k < per_domain(); ++k) {
        b.trials.push_back(draw(d));
        b.domains.push_back(static_cast<int>(d));
      }
    return b;
  }

 private:
  std::size_t draw(std::size_t d) {
    std::vector<std::size_t>& pool = pools_.at(d);
    std::size_t& cur = cursor_[d];
    if (cur >= pool.size()) {
      rng_.shuffle(pool);
      cur = 0;
    }
    return pool[cur++];
  }

  std::map<std::size_t, std::vector<std::size_t>> pools_;
  std::size_t batch_, per_batch_;
  Rng rng_;
  std::vector<std::size_t> domain_ids_, domain_order_;
  std::size_t domain_cursor_ = 0;
  std::map<std::size_t, std::size_t> cursor_;
};

// ---------------------------------------------------------------------------
// Synthetic generator

struct SynthSpec {
  std::size_t classes = 4;
  std::size_t sensors = 8;
  std::size_t domains = 4;
  std::size_t trials_per_cell = 50;  ///< windows per (domain, class)
  double fs = 1000.0;
  double window_ms = 200.0;
  double overlap_ms = 100.0;
  std::uint64_t seed = 0;
  int subject = 1;
  double active_gain = 1.6;    ///< latent drive amplitude of an active muscle group
  double shift = 0.45;         ///< |log eig| of the per-domain congruence (cond = exp(2 shift))
  double gain_spread = 0.3;    ///< per-channel log-gain spread per domain
  double offset_spread = 0.5;  ///< per-channel offset spread per domain
  double band_low_hz = 20.0;
  double band_high_hz = 150.0;
};

inline void validate(const SynthSpec& s) {
  if (s.sensors < 4 || s.sensors % 2 != 0) throw ConfigError("synth: sensors must be even and at least 4");
  if (s.classes < 2) throw ConfigError("synth: need at least 2 classes");
  if (s.domains < 1) throw ConfigError("synth: need at least 1 domain");
  if (s.trials_per_cell < 1) throw ConfigError("synth: trials per cell must be positive");
  if (!(s.fs > 0.0) || !(s.window_ms > s.overlap_ms && s.overlap_ms > 0.0)) throw ConfigError("synth: bad sampling/window settings");
  if (!(s.band_low_hz > 0.0 && s.band_high_hz > s.band_low_hz && s.band_high_hz < s.fs / 2.0))
    throw ConfigError("synth: band must satisfy 0 < low < high < Fs/2");
  if (!(s.shift >= 0.0 && s.shift <= 0.5 * std::log(3.0) + 1e-12))
    throw ConfigError("synth: shift must lie in [0, ln(3)/2] so the congruence has cond <= 3");
}

/// Sensor layout used by the generator: flexors are the first half, extensors the
/// second; within each half the first half of the sensors is proximal.
struct SynthLayout {
  std::vector<std::size_t> flexor, extensor, proximal, distal;
};

inline SynthLayout synth_layout(std::size_t c) {
  SynthLayout l;
  const std::size_t half = c / 2;
  for (std::size_t i = 0; i < half; ++i) l.flexor.push_back(i);
  for (std::size_t i = half; i < c; ++i) l.extensor.push_back(i);
  for (std::size_t i = 0; i < c; ++i) (i % half < (half + 1) / 2 ? l.proximal : l.distal).push_back(i);
  // Balance proximal/distal to exactly c/2 each when half is odd.
  while (l.proximal.size() > half) {
    l.distal.push_back(l.proximal.back());
    l.proximal.pop_back();
  }
  std::sort(l.distal.begin(), l.distal.end());
  return l;
}

/// Active muscle groups per class: bit 0 flexor, 1 extensor, 2 proximal, 3 distal.
inline unsigned synth_class_pattern(std::size_t k) {
  static constexpr unsigned patterns[] = {0b0001, 0b0010, 0b0011, 0b0000, 0b0100, 0b1000, 0b0101, 0b1010, 0b0110, 0b1001};
  return patterns[k % std::size(patterns)];
}

inline std::string synth_class_name(std::size_t k) {
  static const char* names[] = {"flexion", "extension", "co-contraction", "rest", "proximal", "distal",
                                "flexion-proximal", "extension-distal", "extension-proximal", "flexion-distal"};
  std::string s = names[k % std::size(names)];
  if (k >= std::size(names)) s += "-" + std::to_string(k / std::size(names));
  return s;
}

namespace detail {

/// RBJ band-pass biquad (constant peak gain).
class Biquad {
 public:
  Biquad(double fs, double f0, double q) {
    const double w = 2.0 * std::numbers::pi * f0 / fs;
    const double alpha = std::sin(w) / (2.0 * q);
    const double a0 = 1.0 + alpha;
    b0_ = alpha / a0;
    b2_ = -alpha / a0;
    a1_ = -2.0 * std::cos(w) / a0;
    a2_ = (1.0 - alpha) / a0;
  }
  double operator()(double x) {
    const double y = b0_ * x + b2_ * x2_ - a1_ * y1_ - a2_ * y2_;
    x2_ = x1_;
    x1_ = x;
    y2_ = y1_;
    y1_ = y;
    return y;
  }

 private:
  double b0_, b2_, a1_, a2_;
  double x1_ = 0, x2_ = 0, y1_ = 0, y2_ = 0;
};

/// Band-limited unit-variance noise of length n (burn-in discarded).
inline std::vector<double> band_noise(std::size_t n, const SynthSpec& s, Rng& rng) {
  const double f0 = std::sqrt(s.band_low_hz * s.band_high_hz);
  const double q = f0 / (s.band_high_hz - s.band_low_hz);
  Biquad f(s.fs, f0, q);
  const std::size_t burn = 200;
  std::vector<double> out(n);
  double ss = 0.0;
  for (std::size_t i = 0; i < n + burn; ++i) {
    const double y = f(rng.normal());
    if (i >= burn) {
      out[i - burn] = y;
      ss += y * y;
    }
  }
  const double scale = 1.0 / std::sqrt(std::max(ss / static_cast<double>(n), 1e-300));
  for (double& v : out) v *= scale;
  return out;
}

}  // namespace detail

/// Latent spatial covariance of class k: sum over active groups g of
/// gain^2 l_g l_g^T plus unit independent sensor noise.
inline Tensor synth_class_covariance(const SynthSpec& s, std::size_t k, const std::vector<Tensor>& loadings) {
  const std::size_t c = s.sensors;
  Tensor sigma = Tensor::identity(c);
  const unsigned pat = synth_class_pattern(k);
  for (unsigned g = 0; g < 4; ++g) {
    if (!(pat >> g & 1U)) continue;
    const Tensor& l = loadings[g];
    for (std::size_t i = 0; i < c; ++i)
      for (std::size_t j = 0; j < c; ++j) sigma.at(i, j) += s.active_gain * s.active_gain * l[i] * l[j];
  }
  return sigma;
}

/// Domain-shifted synthetic sEMG. Per class, a block-structured spatial
/// covariance colors band-limited noise; per domain, an SPD congruence with
/// cond <= 3 plus per-channel gain and offset distorts the recording; each
/// (domain, class) stream is then windowed, Hampel-filtered and z-scored.
inline Dataset synth_generate(const SynthSpec& s) {
  validate(s);
  const std::size_t c = s.sensors;
  const SynthLayout layout = synth_layout(c);
  Rng rng(mix_seed(s.seed, 0x5e17));

  // Group loadings: positive weights on the group's sensors.
  const std::vector<std::size_t>* groups[] = {&layout.flexor, &layout.extensor, &layout.proximal, &layout.distal};
  std::vector<Tensor> loadings;
  for (const auto* g : groups) {
    Tensor l({c});
    for (std::size_t i : *g) l[i] = rng.uniform(0.7, 1.3);
    loadings.push_back(l);
  }

  Dataset ds;
  DatasetManifest& m = ds.manifest;
  m.name = "synthetic";
  m.fs = s.fs;
  m.sensors = c;
  for (std::size_t k = 0; k < s.classes; ++k) m.class_names.push_back(synth_class_name(k));
  for (std::size_t d = 0; d < s.domains; ++d) m.domains.push_back({s.subject, static_cast<int>(d + 1)});
  m.flexor_ids = layout.flexor;
  m.extensor_ids = layout.extensor;
  m.proximal_ids = layout.proximal;
  m.distal_ids = layout.distal;
  m.window_ms = s.window_ms;
  m.overlap_ms = s.overlap_ms;
  m.provenance = "synth seed=" + std::to_string(s.seed);

  std::vector<Tensor> class_sqrt;
  for (std::size_t k = 0; k < s.classes; ++k) class_sqrt.push_back(sym_fn(synth_class_covariance(s, k, loadings), SpectralFn::sqrt()));

  const std::size_t w = m.window_samples();
  const std::size_t hop = w - m.overlap_samples();
  const std::size_t stream_len = w + (s.trials_per_cell - 1) * hop;
  PreprocessConfig pre{s.fs, s.window_ms, s.overlap_ms, 0, 3.0};

  std::uint64_t next_id = 0;
  for (std::size_t d = 0; d < s.domains; ++d) {
    Rng drng(mix_seed(s.seed, 1000 + d));
    // SPD congruence exp(S), S with eigenvalues +-shift in a random basis.
    std::vector<double> eig(c);
    for (std::size_t i = 0; i < c; ++i) eig[i] = std::exp(i < c / 2 ? s.shift : -s.shift);
    Tensor q = drng.normal_tensor({c, c});
    const SymEig basis = sym_eig(symmetrize(q));
    const Tensor a = symmetrize(reconstruct(basis.vectors, eig));
    std::vector<double> gain(c), offset(c);
    for (std::size_t i = 0; i < c; ++i) {
      gain[i] = std::exp(drng.uniform(-s.gain_spread, s.gain_spread));
      offset[i] = drng.uniform(-s.offset_spread, s.offset_spread);
    }
    const Tensor distortion = matmul(Tensor::diag(gain), a);
    for (std::size_t k = 0; k < s.classes; ++k) {
      Rng srng(mix_seed(s.seed, 100000 + d * 1000 + k));
      Tensor white({c, stream_len});
      for (std::size_t i = 0; i < c; ++i) {
        const std::vector<double> n = detail::band_noise(stream_len, s, srng);
        std::copy(n.begin(), n.end(), white.data().begin() + static_cast<std::ptrdiff_t>(i * stream_len));
      }
      Tensor stream = matmul(matmul(distortion, class_sqrt[k]), white);
      for (std::size_t i = 0; i < c; ++i)
        for (std::size_t t = 0; t < stream_len; ++t) stream.at(i, t) += offset[i];
      for (const Tensor& seg : preprocess(stream, pre)) {
        Trial tr;
        tr.signal.assign(seg.data().begin(), seg.data().end());
        tr.label = k;
        tr.domain = d;
        tr.id = next_id++;
        ds.trials.push_back(std::move(tr));
      }
    }
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Directory format: manifest.json + trials.f32 + index.csv

namespace detail {

inline void write_f32_le(std::ostream& os, float v) {
  const auto bits = std::bit_cast<std::uint32_t>(v);
  const char bytes[4] = {static_cast<char>(bits & 0xff), static_cast<char>(bits >> 8 & 0xff), static_cast<char>(bits >> 16 & 0xff),
                         static_cast<char>(bits >> 24 & 0xff)};
  os.write(bytes, 4);
}

inline float read_f32_le(const unsigned char* p) {
  const std::uint32_t bits = static_cast<std::uint32_t>(p[0]) | static_cast<std::uint32_t>(p[1]) << 8 |
                             static_cast<std::uint32_t>(p[2]) << 16 | static_cast<std::uint32_t>(p[3]) << 24;
  return std::bit_cast<float>(bits);
}

inline nlohmann::json manifest_json(const DatasetManifest& m, std::size_t trial_count) {
  nlohmann::json doms = nlohmann::json::array();
  for (const Domain& d : m.domains) doms.push_back({{"subject", d.subject}, {"session", d.session}});
  return {{"format_version", kFormatVersion},
          {"name", m.name},
          {"fs", m.fs},
          {"sensors", m.sensors},
          {"class_names", m.class_names},
          {"domains", doms},
          {"flexor_ids", m.flexor_ids},
          {"extensor_ids", m.extensor_ids},
          {"proximal_ids", m.proximal_ids},
          {"distal_ids", m.distal_ids},
          {"window_ms", m.window_ms},
          {"overlap_ms", m.overlap_ms},
          {"provenance", m.provenance},
          {"trial_count", trial_count}};
}

inline DatasetManifest manifest_from_json(const nlohmann::json& j, const std::string& where) {
  static const std::set<std::string> known{"format_version", "name",       "fs",        "sensors",   "class_names",
                                           "domains",        "flexor_ids", "extensor_ids", "proximal_ids", "distal_ids",
                                           "window_ms",      "overlap_ms", "provenance", "trial_count"};
  if (!j.is_object()) throw DataError(where + ": manifest must be a JSON object");
  if (!j.contains("format_version")) throw DataError(where + ": missing format_version");
  const int version = j.at("format_version").get<int>();
  if (version != kFormatVersion)
    throw DataError(where + ": unsupported format_version " + std::to_string(version) + " (expected " + std::to_string(kFormatVersion) + ")");
  for (const auto& [k, v] : j.items())
    if (!known.count(k)) throw DataError(where + ": unknown manifest key '" + k + "'");
  try {
    DatasetManifest m;
    m.name = j.at("name").get<std::string>();
    m.fs = j.at("fs").get<double>();
    m.sensors = j.at("sensors").get<std::size_t>();
    m.class_names = j.at("class_names").get<std::vector<std::string>>();
    for (const auto& d : j.at("domains")) m.domains.push_back({d.at("subject").get<int>(), d.at("session").get<int>()});
    m.flexor_ids = j.at("flexor_ids").get<std::vector<std::size_t>>();
    m.extensor_ids = j.at("extensor_ids").get<std::vector<std::size_t>>();
    m.proximal_ids = j.at("proximal_ids").get<std::vector<std::size_t>>();
    m.distal_ids = j.at("distal_ids").get<std::vector<std::size_t>>();
    m.window_ms = j.at("window_ms").get<double>();
    m.overlap_ms = j.at("overlap_ms").get<double>();
    m.provenance = j.value("provenance", std::string{});
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(where + ": " + e.what());
  }
}

}  // namespace detail

inline void write_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  validate(ds);
  std::filesystem::create_directories(dir);
  {
    std::ofstream os(dir / "manifest.json");
    if (!os) throw DataError("cannot write " + (dir / "manifest.json").string());
    os << detail::manifest_json(ds.manifest, ds.trials.size()).dump(2) << "\n";
  }
  std::ofstream bin(dir / "trials.f32", std::ios::binary);
  std::ofstream idx(dir / "index.csv");
  if (!bin || !idx) throw DataError("cannot write dataset files under " + dir.string());
  idx << "trial_id,byte_offset,label,subject,session\n";
  std::uint64_t offset = 0;
  for (const Trial& t : ds.trials) {
    const Domain& d = ds.manifest.domains[t.domain];
    idx << t.id << ',' << offset << ',' << t.label << ',' << d.subject << ',' << d.session << '\n';
    for (float v : t.signal) detail::write_f32_le(bin, v);
    offset += t.signal.size() * 4;
  }
  if (!bin || !idx) throw DataError("write failed under " + dir.string());
}

inline Dataset read_dataset(const std::filesystem::path& dir) {
  const auto mpath = dir / "manifest.json";
  std::ifstream ms(mpath);
  if (!ms) throw DataError("cannot open " + mpath.string());
  nlohmann::json j;
  try {
    ms >> j;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(mpath.string() + ": corrupt header: " + e.what());
  }
  Dataset ds;
  ds.manifest = detail::manifest_from_json(j, mpath.string());
  validate(ds.manifest);
  const std::size_t count = j.value("trial_count", std::size_t{0});
  const std::size_t per_trial = ds.manifest.sensors * ds.manifest.window_samples();

  const auto bpath = dir / "trials.f32";
  std::ifstream bs(bpath, std::ios::binary);
  if (!bs) throw DataError("cannot open " + bpath.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(bs)), std::istreambuf_iterator<char>());
  const std::uint64_t expected = static_cast<std::uint64_t>(count) * per_trial * 4;
  if (bytes.size() != expected)
    throw DataError(bpath.string() + ": length mismatch, expected " + std::to_string(expected) + " bytes for " + std::to_string(count) +
                    " trials, found " + std::to_string(bytes.size()));

  const auto ipath = dir / "index.csv";
  std::ifstream is(ipath);
  if (!is) throw DataError("cannot open " + ipath.string());
  std::string line;
  std::getline(is, line);
  if (line.rfind("trial_id,byte_offset,label,subject,session", 0) != 0) throw DataError(ipath.string() + ": corrupt header");
  std::size_t row = 0;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::vector<std::string> cells;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (cells.size() != 5) throw DataError(ipath.string() + ": row " + std::to_string(row + 1) + " has " + std::to_string(cells.size()) + " fields");
    Trial t;
    std::uint64_t offset = 0;
    int subject = 0, session = 0;
    try {
      t.id = std::stoull(cells[0]);
      offset = std::stoull(cells[1]);
      t.label = std::stoull(cells[2]);
      subject = std::stoi(cells[3]);
      session = std::stoi(cells[4]);
    } catch (const std::exception&) {
      throw DataError(ipath.string() + ": row " + std::to_string(row + 1) + " is not numeric");
    }
    const int d = ds.manifest.domain_index(subject, session);
    if (d < 0) throw DataError(ipath.string() + ": row " + std::to_string(row + 1) + " references an undeclared domain");
    t.domain = static_cast<std::size_t>(d);
    if (offset != static_cast<std::uint64_t>(row) * per_trial * 4 || offset + per_trial * 4 > bytes.size())
      throw DataError(ipath.string() + ": row " + std::to_string(row + 1) + " byte offset " + std::to_string(offset) + " is inconsistent");
    t.signal.resize(per_trial);
    for (std::size_t k = 0; k < per_trial; ++k) t.signal[k] = detail::read_f32_le(bytes.data() + offset + 4 * k);
    ds.trials.push_back(std::move(t));
    ++row;
  }
  if (row != count)
    throw DataError(ipath.string() + ": length mismatch, " + std::to_string(row) + " rows for " + std::to_string(count) + " trials");
  validate(ds);
  return ds;
}

}  // namespace tmknet::data

#endif  // TMKNET_DATA_HPP
