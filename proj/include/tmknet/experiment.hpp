#ifndef TMKNET_EXPERIMENT_HPP
#define TMKNET_EXPERIMENT_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "tmknet/autodiff.hpp"
#include "tmknet/data.hpp"
#include "tmknet/error.hpp"
#include "tmknet/metrics.hpp"
#include "tmknet/model.hpp"
#include "tmknet/optim.hpp"
#include "tmknet/spd_layers.hpp"

namespace tmknet::experiment {

enum class AdaptMode { PostHoc, Interleaved };

struct Ablation {
  bool drop_mrt = false;
  bool drop_mss = false;
  bool drop_global = false;
  bool drop_flexor_extensor = false;
  bool drop_proximal_distal = false;
  bool drop_dilated = false;
  bool operator==(const Ablation&) const = default;
};

struct RunConfig {
  std::string data;
  int subject = 1;
  int target_session = 1;
  // stem
  double r_data = 0.2;
  std::vector<double> r_resolution{1.0 / 16, 1.0 / 32, 1.0 / 64};
  std::size_t n_t = 64;
  std::size_t n_s = 40;
  std::size_t pool_size = 4;
  double leaky_slope = 0.01;
  // backbone
  std::size_t n_b = 30;
  double eps_reeig = 1e-4;
  double eps_var = 1e-5;
  double cov_floor = 1e-6;
  double cov_trace_scale = 1e-4;
  double gamma_source_floor = 0.1;
  double gamma_target_floor = 0.05;
  bool shared_norm = false;
  // optimization
  double lr = 1e-3;
  double weight_decay = 1e-4;
  std::size_t batch = 50;
  std::size_t domains_per_batch = 1;
  std::size_t epochs = 50;
  double holdout = 0.1;
  std::uint64_t seed = 0;
  AdaptMode adaptation = AdaptMode::PostHoc;
  std::size_t adapt_batch = 50;
  std::size_t adapt_passes = 1;
  Ablation ablation;
};

inline nlohmann::json to_json(const RunConfig& c) {
  return {{"data", c.data},
          {"subject", c.subject},
          {"target_session", c.target_session},
          {"r_data", c.r_data},
          {"r_resolution", c.r_resolution},
          {"n_t", c.n_t},
          {"n_s", c.n_s},
          {"pool_size", c.pool_size},
          {"leaky_slope", c.leaky_slope},
          {"n_b", c.n_b},
          {"eps_reeig", c.eps_reeig},
          {"eps_var", c.eps_var},
          {"cov_floor", c.cov_floor},
          {"cov_trace_scale", c.cov_trace_scale},
          {"gamma_source_floor", c.gamma_source_floor},
          {"gamma_target_floor", c.gamma_target_floor},
          {"shared_norm", c.shared_norm},
          {"lr", c.lr},
          {"weight_decay", c.weight_decay},
          {"batch", c.batch},
          {"domains_per_batch", c.domains_per_batch},
          {"epochs", c.epochs},
          {"holdout", c.holdout},
          {"seed", c.seed},
          {"adaptation", c.adaptation == AdaptMode::PostHoc ? "posthoc" : "interleaved"},
          {"adapt_batch", c.adapt_batch},
          {"adapt_passes", c.adapt_passes},
          {"ablation",
           {{"drop_mrt", c.ablation.drop_mrt},
            {"drop_mss", c.ablation.drop_mss},
            {"drop_global", c.ablation.drop_global},
            {"drop_flexor_extensor", c.ablation.drop_flexor_extensor},
            {"drop_proximal_distal", c.ablation.drop_proximal_distal},
            {"drop_dilated", c.ablation.drop_dilated}}}};
}

namespace detail {

template <class T>
void read_key(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

inline void reject_unknown(const nlohmann::json& j, const nlohmann::json& reference, const std::string& where) {
  for (const auto& [k, v] : j.items())
    if (!reference.contains(k)) throw ConfigError(where + ": unknown key '" + k + "'");
}

}  // namespace detail

/// Missing keys keep their defaults; unknown keys are rejected.
inline RunConfig run_config_from_json(const nlohmann::json& j, RunConfig c = {}) {
  if (!j.is_object()) throw ConfigError("run config: expected a JSON object");
  const nlohmann::json ref = to_json(c);
  detail::reject_unknown(j, ref, "run config");
  try {
    using detail::read_key;
    read_key(j, "data", c.data);
    read_key(j, "subject", c.subject);
    read_key(j, "target_session", c.target_session);
    read_key(j, "r_data", c.r_data);
    read_key(j, "r_resolution", c.r_resolution);
    read_key(j, "n_t", c.n_t);
    read_key(j, "n_s", c.n_s);
    read_key(j, "pool_size", c.pool_size);
    read_key(j, "leaky_slope", c.leaky_slope);
    read_key(j, "n_b", c.n_b);
    read_key(j, "eps_reeig", c.eps_reeig);
    read_key(j, "eps_var", c.eps_var);
    read_key(j, "cov_floor", c.cov_floor);
    read_key(j, "cov_trace_scale", c.cov_trace_scale);
    read_key(j, "gamma_source_floor", c.gamma_source_floor);
    read_key(j, "gamma_target_floor", c.gamma_target_floor);
    read_key(j, "shared_norm", c.shared_norm);
    read_key(j, "lr", c.lr);
    read_key(j, "weight_decay", c.weight_decay);
    read_key(j, "batch", c.batch);
    read_key(j, "domains_per_batch", c.domains_per_batch);
    read_key(j, "epochs", c.epochs);
    read_key(j, "holdout", c.holdout);
    read_key(j, "seed", c.seed);
    if (j.contains("adaptation")) {
      const std::string m = j.at("adaptation").get<std::string>();
      if (m == "posthoc") c.adaptation = AdaptMode::PostHoc;
      else if (m == "interleaved") c.adaptation = AdaptMode::Interleaved;
      else throw ConfigError("run config: adaptation must be 'posthoc' or 'interleaved', got '" + m + "'");
    }
    read_key(j, "adapt_batch", c.adapt_batch);
    read_key(j, "adapt_passes", c.adapt_passes);
    if (j.contains("ablation")) {
      const auto& a = j.at("ablation");
      if (!a.is_object()) throw ConfigError("run config: ablation must be an object");
      detail::reject_unknown(a, ref.at("ablation"), "run config ablation");
      read_key(a, "drop_mrt", c.ablation.drop_mrt);
      read_key(a, "drop_mss", c.ablation.drop_mss);
      read_key(a, "drop_global", c.ablation.drop_global);
      read_key(a, "drop_flexor_extensor", c.ablation.drop_flexor_extensor);
      read_key(a, "drop_proximal_distal", c.ablation.drop_proximal_distal);
      read_key(a, "drop_dilated", c.ablation.drop_dilated);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("run config: ") + e.what());
  }
  return c;
}

inline void validate(const RunConfig& c) {
  if (c.batch < 2) throw ConfigError("run config: batch must be at least 2");
  if (c.domains_per_batch == 0 || c.batch % c.domains_per_batch != 0)
    throw ConfigError("run config: batch must be divisible by domains_per_batch");
  if (c.batch / c.domains_per_batch < 2) throw ConfigError("run config: need at least 2 trials per domain in a batch");
  if (!(c.lr > 0.0) || c.weight_decay < 0.0) throw ConfigError("run config: lr must be positive and weight_decay non-negative");
  if (!(c.holdout >= 0.0 && c.holdout < 1.0)) throw ConfigError("run config: holdout must lie in [0, 1)");
  if (c.adapt_batch < 2) throw ConfigError("run config: adapt_batch must be at least 2");
  const Ablation& a = c.ablation;
  if (a.drop_mss && a.drop_global) throw ConfigError("run config: drop_mss keeps only the global kernel, which drop_global removes");
  if (!a.drop_mss && a.drop_global && a.drop_flexor_extensor && a.drop_proximal_distal && a.drop_dilated)
    throw ConfigError("run config: every MSS kernel is dropped");
}

inline stem::StemVariant variant_of(const Ablation& a) {
  stem::StemVariant v;
  v.multi_resolution = !a.drop_mrt;
  if (a.drop_mss) {
    v.flexor = v.extensor = v.proximal_distal = v.dilated = false;
    return v;
  }
  v.global = !a.drop_global;
  v.flexor = v.extensor = !a.drop_flexor_extensor;
  v.proximal_distal = !a.drop_proximal_distal;
  v.dilated = !a.drop_dilated;
  return v;
}

inline ModelConfig model_config(const RunConfig& c, const data::DatasetManifest& m) {
  ModelConfig mc;
  auto& s = mc.stem;
  s.fs = m.fs;
  s.r_data = c.r_data;
  s.r_resolution = c.r_resolution;
  s.n_t = c.n_t;
  s.n_s = c.n_s;
  s.pool_size = c.pool_size;
  s.leaky_slope = c.leaky_slope;
  s.sensors = m.sensors;
  s.flexor_ids = m.flexor_ids;
  s.extensor_ids = m.extensor_ids;
  s.proximal_ids = m.proximal_ids;
  s.distal_ids = m.distal_ids;
  s.variant = variant_of(c.ablation);
  auto& b = mc.backbone;
  b.cov.floor = c.cov_floor;
  b.cov.trace_scale = c.cov_trace_scale;
  b.eps_reeig = c.eps_reeig;
  b.eps_var = c.eps_var;
  b.n_b = c.n_b;
  b.n_c = m.classes();
  b.gamma_source_floor = c.gamma_source_floor;
  b.gamma_target_floor = c.gamma_target_floor;
  mc.window = m.window_samples();
  mc.norm = c.shared_norm ? NormMode::Shared : NormMode::DomainSpecific;
  validate(mc);
  return mc;
}

// ---------------------------------------------------------------------------
// Evaluation

inline constexpr std::size_t kEvalChunk = 64;

inline std::size_t argmax_row(const Tensor& logits, std::size_t row) {
  const std::size_t n = logits.dim(1);
  std::size_t best = 0;
  for (std::size_t k = 1; k < n; ++k)
    if (logits.at(row, k) > logits.at(row, best)) best = k;
  return best;
}

/// Eval-mode predictions for the given trials.
inline std::vector<std::size_t> predict(TmkNet& net, const data::Dataset& ds, const std::vector<std::size_t>& idx) {
  std::vector<std::size_t> out;
  out.reserve(idx.size());
  for (std::size_t start = 0; start < idx.size(); start += kEvalChunk) {
    const std::vector<std::size_t> chunk(idx.begin() + static_cast<std::ptrdiff_t>(start),
                                         idx.begin() + static_cast<std::ptrdiff_t>(std::min(idx.size(), start + kEvalChunk)));
    std::vector<int> doms;
    for (std::size_t i : chunk) doms.push_back(static_cast<int>(ds.trials[i].domain));
    ad::Tape tape;
    const auto fw = net.forward(tape, ds.inputs(chunk), doms, Pass::Eval);
    for (std::size_t r = 0; r < chunk.size(); ++r) out.push_back(argmax_row(fw.logits.value(), r));
  }
  return out;
}

inline metrics::MetricsReport evaluate(TmkNet& net, const data::Dataset& ds, const std::vector<std::size_t>& idx) {
  if (idx.empty()) throw DataError("evaluate: no trials");
  for (std::size_t i : idx) {
    const int slot = net.norm_slot(static_cast<int>(ds.trials[i].domain));
    if (!net.dsbn().initialized(slot))
      throw StateError("evaluate: statistics for domain " + std::to_string(ds.trials[i].domain) + " are not initialized");
  }
  const auto pred = predict(net, ds, idx);
  std::vector<std::size_t> truth;
  for (std::size_t i : idx) truth.push_back(ds.trials[i].label);
  auto r = metrics::report_from(metrics::ConfusionMatrix(ds.manifest.classes(), truth, pred));
  r.seed = net.seed();
  r.config_hash = net.config_hash();
  return r;
}

// ---------------------------------------------------------------------------
// Unsupervised adaptation (signals only)

/// Target-domain signals without labels.
struct UnlabeledTrials {
  std::size_t domain = 0;
  std::vector<Tensor> signals;  ///< each (1, 1, c, t)
};

inline UnlabeledTrials unlabeled(const data::Dataset& ds, std::size_t domain) {
  UnlabeledTrials u{domain, {}};
  for (std::size_t i : ds.indices_of_domain(domain)) u.signals.push_back(ds.input(i));
  return u;
}

/// Concatenates (1, ...) tensors along the leading axis.
inline Tensor batch_of(const std::vector<Tensor>& items) {
  if (items.empty()) throw ShapeError("batch_of: no items");
  Shape shape = items.front().shape();
  shape[0] = items.size();
  Tensor out(shape);
  const std::size_t per = items.front().size();
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (items[i].size() != per) throw ShapeError("batch_of: items differ in size");
    std::copy(items[i].data().begin(), items[i].data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(i * per));
  }
  return out;
}

/// Chunks of `batch` consecutive items; a trailing remainder below 2 joins the previous chunk.
inline std::vector<std::pair<std::size_t, std::size_t>> adapt_chunks(std::size_t n, std::size_t batch) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (std::size_t s = 0; s < n; s += batch) out.emplace_back(s, std::min(n, s + batch));
  if (out.size() > 1 && out.back().second - out.back().first < 2) {
    const auto last = out.back();
    out.pop_back();
    out.back().second = last.second;
  }
  return out;
}

/// Updates the running SPD statistics of a target domain; weights are untouched.
inline void adapt(TmkNet& net, const UnlabeledTrials& target, std::size_t batch = 50, std::size_t passes = 1) {
  const int dom = static_cast<int>(target.domain);
  if (target.signals.size() < 2) throw DataError("adapt: need at least 2 target trials, got " + std::to_string(target.signals.size()));
  if (batch < 2) throw ConfigError("adapt: batch must be at least 2");
  const int slot = net.norm_slot(dom);
  if (!net.dsbn().has(slot)) throw StateError("adapt: domain " + std::to_string(dom) + " is not registered");
  if (net.config().norm == NormMode::DomainSpecific && net.dsbn().stats(slot).role != layers::DomainRole::Target)
    throw StateError("adapt: domain " + std::to_string(dom) + " is a source domain");
  for (std::size_t p = 0; p < passes; ++p)
    for (auto [lo, hi] : adapt_chunks(target.signals.size(), batch)) {
      std::vector<Tensor> items(target.signals.begin() + static_cast<std::ptrdiff_t>(lo),
                                target.signals.begin() + static_cast<std::ptrdiff_t>(hi));
      const std::vector<int> doms(hi - lo, dom);
      net.adapt_batch(batch_of(items), doms);
    }
}

// ---------------------------------------------------------------------------
// Training

struct TrainResult {
  TmkNet net;
  metrics::MetricsReport validation;  ///< source holdout (or training set when no holdout)
  std::vector<double> loss_curve;
  std::size_t best_epoch = 0;
  std::size_t steps = 0;
  data::SplitPlan split;
};

struct SourceSplit {
  std::map<std::size_t, std::vector<std::size_t>> train;
  std::vector<std::size_t> holdout;
};

/// Per source domain, a seeded shuffle and a holdout fraction (rounded, taken only when
/// the domain keeps at least 2 training trials).
inline SourceSplit split_sources(const data::Dataset& ds, const data::SplitPlan& plan, double holdout, std::uint64_t seed) {
  SourceSplit s;
  Rng rng(mix_seed(seed, 0x5011));
  for (std::size_t d : plan.source_domains) {
    std::vector<std::size_t> idx = ds.indices_of_domain(d);
    if (idx.empty()) throw DataError("train: source domain " + std::to_string(d) + " has no trials");
    rng.shuffle(idx);
    auto h = static_cast<std::size_t>(std::llround(holdout * static_cast<double>(idx.size())));
    if (idx.size() < h + 2) h = 0;
    s.holdout.insert(s.holdout.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(h));
    s.train[d].assign(idx.begin() + static_cast<std::ptrdiff_t>(h), idx.end());
  }
  std::sort(s.holdout.begin(), s.holdout.end());
  return s;
}

inline std::map<std::string, Tensor> collect_grads(const ad::Tape& tape, const TmkNet::Output& out) {
  std::map<std::string, Tensor> g;
  for (const auto& [name, v] : out.params) g.emplace(name, tape.grad(v));
  return g;
}

/// Re-estimates the running SPD statistics of the source slots from evaluation-mode stem
/// features, so they describe what the network sees at inference time.
inline void refresh_source_statistics(TmkNet& net, const data::Dataset& ds,
                                      const std::map<std::size_t, std::vector<std::size_t>>& pools, std::size_t batch) {
  std::set<int> reset;
  for (const auto& [d, idx] : pools) {
    const int slot = net.norm_slot(static_cast<int>(d));
    if (reset.insert(slot).second) {
      auto& st = net.dsbn().stats(slot);
      st.mean = Tensor::identity(net.config().backbone.n_b);
      st.std = 1.0;
      st.steps = 0;
    }
    if (idx.size() < 2) continue;
    for (auto [lo, hi] : adapt_chunks(idx.size(), batch)) {
      const std::vector<std::size_t> chunk(idx.begin() + static_cast<std::ptrdiff_t>(lo), idx.begin() + static_cast<std::ptrdiff_t>(hi));
      const std::vector<int> doms(chunk.size(), static_cast<int>(d));
      net.adapt_batch(ds.inputs(chunk), doms);
    }
  }
}

inline TrainResult train(const RunConfig& cfg, const data::Dataset& ds, std::ostream* log = nullptr) {
  validate(cfg);
  data::validate(ds.manifest);
  const data::SplitPlan plan = data::make_split(ds.manifest, cfg.subject, cfg.target_session);
  TmkNet net(model_config(cfg, ds.manifest), cfg.seed);
  for (std::size_t d : plan.source_domains) net.register_domain(static_cast<int>(d), layers::DomainRole::Source);
  net.register_domain(static_cast<int>(plan.target_domain), layers::DomainRole::Target);

  const SourceSplit split = split_sources(ds, plan, cfg.holdout, cfg.seed);
  if (cfg.domains_per_batch > split.train.size())
    throw ConfigError("train: domains_per_batch exceeds the number of source domains");
  data::BatchSampler sampler(split.train, cfg.batch, cfg.domains_per_batch, mix_seed(cfg.seed, 0xba7c));
  std::vector<std::size_t> train_idx;
  for (const auto& [d, v] : split.train) train_idx.insert(train_idx.end(), v.begin(), v.end());
  std::sort(train_idx.begin(), train_idx.end());
  const std::vector<std::size_t>& val_idx = split.holdout.empty() ? train_idx : split.holdout;

  std::optional<UnlabeledTrials> target;
  std::size_t target_cursor = 0;
  Rng target_rng(mix_seed(cfg.seed, 0x7a6e));
  if (cfg.adaptation == AdaptMode::Interleaved) {
    target = unlabeled(ds, plan.target_domain);
    if (target->signals.size() < 2) throw DataError("train: target domain has fewer than 2 trials");
  }

  optim::AdamConfig adam;
  adam.lr = cfg.lr;
  adam.weight_decay = cfg.weight_decay;

  TrainResult res{net, {}, {}, 0, 0, plan};
  const std::size_t per_epoch = sampler.batches_per_epoch();

  if (cfg.epochs == 0) {
    // Statistics-only pass so the untrained model can be evaluated.
    for (std::size_t s = 0; s < per_epoch; ++s) {
      const data::Batch b = sampler.next();
      ad::Tape tape;
      net.forward(tape, ds.inputs(b.trials), b.domains, Pass::Train);
    }
    refresh_source_statistics(net, ds, split.train, cfg.batch);
    if (target) adapt(net, *target, cfg.adapt_batch);
    res.net = net;
    res.validation = evaluate(res.net, ds, val_idx);
    return res;
  }

  double best_acc = -1.0;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    double loss_sum = 0.0;
    for (std::size_t s = 0; s < per_epoch; ++s) {
      const data::Batch b = sampler.next();
      std::vector<std::size_t> labels;
      for (std::size_t i : b.trials) labels.push_back(ds.trials[i].label);
      ad::Tape tape;
      const auto fw = net.forward(tape, ds.inputs(b.trials), b.domains, Pass::Train);
      const ad::Var loss = ad::cross_entropy(fw.logits, labels);
      const double lv = loss.value()[0];
      if (!std::isfinite(lv)) {
        std::ostringstream os;
        os << "train: loss became non-finite at epoch " << epoch << ", step " << s + 1 << " (last epoch mean "
           << (res.loss_curve.empty() ? 0.0 : res.loss_curve.back()) << ")";
        throw NumericalError(os.str());
      }
      tape.backward(loss);
      optim::adam_step(net.params(), collect_grads(tape, fw), adam);
      loss_sum += lv;
      ++res.steps;
      if (target) {
        std::vector<Tensor> items;
        const std::size_t n = std::min(cfg.adapt_batch, target->signals.size());
        for (std::size_t k = 0; k < n; ++k) {
          if (target_cursor == 0) target_rng.shuffle(target->signals);
          items.push_back(target->signals[target_cursor]);
          target_cursor = (target_cursor + 1) % target->signals.size();
        }
        const std::vector<int> doms(n, static_cast<int>(plan.target_domain));
        net.adapt_batch(batch_of(items), doms);
      }
    }
    res.loss_curve.push_back(loss_sum / static_cast<double>(per_epoch));
    refresh_source_statistics(net, ds, split.train, cfg.batch);
    const double acc = evaluate(net, ds, val_idx).accuracy;
    if (log)
      *log << "epoch " << epoch << "/" << cfg.epochs << " loss " << res.loss_curve.back() << " val_acc " << acc << "\n";
    if (acc > best_acc) {
      best_acc = acc;
      res.best_epoch = epoch;
      res.net = net;
    }
  }
  res.validation = evaluate(res.net, ds, val_idx);
  res.validation.loss_curve = res.loss_curve;
  return res;
}

/// Train on the source sessions, adapt post hoc (unless interleaved), evaluate on the target session.
struct UdaResult {
  TrainResult trained;
  metrics::MetricsReport target;
};

inline UdaResult run_uda(const RunConfig& cfg, const data::Dataset& ds, std::ostream* log = nullptr) {
  UdaResult r{train(cfg, ds, log), {}};
  const std::size_t t = r.trained.split.target_domain;
  if (cfg.adaptation == AdaptMode::PostHoc) adapt(r.trained.net, unlabeled(ds, t), cfg.adapt_batch, cfg.adapt_passes);
  r.target = evaluate(r.trained.net, ds, ds.indices_of_domain(t));
  r.target.loss_curve = r.trained.loss_curve;
  return r;
}

// ---------------------------------------------------------------------------
// Saliency

struct Saliency {
  Tensor map;                     ///< (c, t) absolute input gradient
  std::vector<double> per_sensor;  ///< max over time
};

/// |d logit / d x| for any differentiable scorer of a (1, 1, c, t) input.
using Scorer = std::function<ad::Var(ad::Tape&, const ad::Var& input)>;

inline Saliency saliency(const Scorer& scorer, const Tensor& x) {
  if (x.rank() != 4 || x.dim(0) != 1 || x.dim(1) != 1) throw ShapeError("saliency: expected a (1,1,c,t) input");
  const std::size_t c = x.dim(2), t = x.dim(3);
  ad::Tape tape;
  const ad::Var in = tape.leaf(x, true);
  const ad::Var score = scorer(tape, in);
  if (score.value().size() != 1) throw ShapeError("saliency: scorer must return a scalar");
  tape.backward(score);
  const Tensor g = tape.grad(in);
  Saliency s{Tensor({c, t}), std::vector<double>(c, 0.0)};
  for (std::size_t i = 0; i < c; ++i)
    for (std::size_t j = 0; j < t; ++j) {
      const double v = std::abs(g[i * t + j]);
      s.map.at(i, j) = v;
      s.per_sensor[i] = std::max(s.per_sensor[i], v);
    }
  return s;
}

inline Saliency saliency(TmkNet& net, const Tensor& x, std::size_t domain, std::size_t target_class) {
  if (target_class >= net.config().backbone.n_c)
    throw ConfigError("saliency: class " + std::to_string(target_class) + " out of range");
  if (!net.dsbn().initialized(net.norm_slot(static_cast<int>(domain))))
    throw StateError("saliency: statistics for domain " + std::to_string(domain) + " are not initialized");
  const int dom = static_cast<int>(domain);
  return saliency(
      [&](ad::Tape& tape, const ad::Var& in) {
        const auto fw = net.forward(tape, in, std::span<const int>(&dom, 1), Pass::Eval);
        return ad::pick(ad::reshape(fw.logits, {fw.logits.value().size()}), target_class);
      },
      x);
}

// ---------------------------------------------------------------------------
// Feature export

struct FeatureRow {
  std::uint64_t trial_id = 0;
  std::size_t label = 0;
  std::size_t domain = 0;
  std::vector<double> pre;   ///< log-vectorized SPD feature before domain normalization
  std::vector<double> post;  ///< ... and after
};

inline std::vector<FeatureRow> export_features(TmkNet& net, const data::Dataset& ds, const std::vector<std::size_t>& idx) {
  for (std::size_t i : idx)
    if (!net.dsbn().initialized(net.norm_slot(static_cast<int>(ds.trials[i].domain))))
      throw StateError("export_features: statistics for domain " + std::to_string(ds.trials[i].domain) + " are not initialized");
  std::vector<FeatureRow> rows;
  for (std::size_t start = 0; start < idx.size(); start += kEvalChunk) {
    const std::vector<std::size_t> chunk(idx.begin() + static_cast<std::ptrdiff_t>(start),
                                         idx.begin() + static_cast<std::ptrdiff_t>(std::min(idx.size(), start + kEvalChunk)));
    std::vector<int> doms;
    for (std::size_t i : chunk) doms.push_back(static_cast<int>(ds.trials[i].domain));
    ad::Tape tape;
    const auto fw = net.forward(tape, ds.inputs(chunk), doms, Pass::Eval);
    for (std::size_t r = 0; r < chunk.size(); ++r) {
      const auto& tr = ds.trials[chunk[r]];
      const Tensor pre = sym_fn(fw.pre_norm.value().slice(r), SpectralFn::log());
      const Tensor post = sym_fn(fw.post_norm.value().slice(r), SpectralFn::log());
      rows.push_back({tr.id, tr.label, tr.domain, layers::vectorize_upper(pre), layers::vectorize_upper(post)});
    }
  }
  return rows;
}

inline void write_features_csv(const std::vector<FeatureRow>& rows, std::ostream& os) {
  const std::size_t d = rows.empty() ? 0 : rows.front().pre.size();
  os << "trial_id,label,domain";
  for (std::size_t k = 0; k < d; ++k) os << ",pre_" << k;
  for (std::size_t k = 0; k < d; ++k) os << ",post_" << k;
  os << "\n" << std::setprecision(17);
  for (const auto& r : rows) {
    os << r.trial_id << "," << r.label << "," << r.domain;
    for (double v : r.pre) os << "," << v;
    for (double v : r.post) os << "," << v;
    os << "\n";
  }
}

/// Mean pairwise Euclidean distance between per-domain centroids of the chosen block.
inline double between_domain_dispersion(const std::vector<FeatureRow>& rows, bool post) {
  std::map<std::size_t, std::pair<std::vector<double>, std::size_t>> cent;
  for (const auto& r : rows) {
    const auto& f = post ? r.post : r.pre;
    auto& [sum, n] = cent[r.domain];
    if (sum.empty()) sum.assign(f.size(), 0.0);
    for (std::size_t k = 0; k < f.size(); ++k) sum[k] += f[k];
    ++n;
  }
  std::vector<std::vector<double>> cs;
  for (auto& [d, sn] : cent) {
    for (double& v : sn.first) v /= static_cast<double>(sn.second);
    cs.push_back(sn.first);
  }
  double total = 0.0;
  std::size_t pairs = 0;
  for (std::size_t a = 0; a < cs.size(); ++a)
    for (std::size_t b = a + 1; b < cs.size(); ++b) {
      double s = 0.0;
      for (std::size_t k = 0; k < cs[a].size(); ++k) s += (cs[a][k] - cs[b][k]) * (cs[a][k] - cs[b][k]);
      total += std::sqrt(s);
      ++pairs;
    }
  return pairs == 0 ? 0.0 : total / static_cast<double>(pairs);
}

// ---------------------------------------------------------------------------
// Ablation

enum class Variant { Full, NoMrt, NoMss, NoGlobal, NoFlexorExtensor, NoProximalDistal, NoDilated };

inline const std::vector<std::pair<Variant, std::string>>& variant_names() {
  static const std::vector<std::pair<Variant, std::string>> names{
      {Variant::Full, "full"},           {Variant::NoMrt, "no-mrt"},
      {Variant::NoMss, "no-mss"},        {Variant::NoGlobal, "no-global"},
      {Variant::NoFlexorExtensor, "no-flexor-extensor"}, {Variant::NoProximalDistal, "no-proximal-distal"},
      {Variant::NoDilated, "no-dilated"}};
  return names;
}

inline Variant parse_variant(const std::string& s) {
  for (const auto& [v, n] : variant_names())
    if (n == s) return v;
  throw ConfigError("ablate: unknown variant '" + s + "'");
}

inline std::string variant_label(Variant v) {
  switch (v) {
    case Variant::Full: return "TMKNet (full)";
    case Variant::NoMrt: return "w/o MRT";
    case Variant::NoMss: return "w/o MSS";
    case Variant::NoGlobal: return "w/o global kernel";
    case Variant::NoFlexorExtensor: return "w/o flexor and extensor kernels";
    case Variant::NoProximalDistal: return "w/o proximal-distal kernel";
    case Variant::NoDilated: return "w/o dilated kernel";
  }
  return "?";
}

inline RunConfig with_variant(RunConfig c, Variant v) {
  c.ablation = {};
  switch (v) {
    case Variant::Full: break;
    case Variant::NoMrt: c.ablation.drop_mrt = true; break;
    case Variant::NoMss: c.ablation.drop_mss = true; break;
    case Variant::NoGlobal: c.ablation.drop_global = true; break;
    case Variant::NoFlexorExtensor: c.ablation.drop_flexor_extensor = true; break;
    case Variant::NoProximalDistal: c.ablation.drop_proximal_distal = true; break;
    case Variant::NoDilated: c.ablation.drop_dilated = true; break;
  }
  return c;
}

struct AblationRow {
  Variant variant;
  metrics::MetricsReport report;
};

/// Trains and evaluates the full model followed by each requested variant, all with the same seed.
inline std::vector<AblationRow> ablate(const RunConfig& cfg, const data::Dataset& ds, const std::vector<Variant>& variants,
                                       std::ostream* log = nullptr) {
  std::vector<Variant> order{Variant::Full};
  for (Variant v : variants)
    if (std::find(order.begin(), order.end(), v) == order.end()) order.push_back(v);
  std::vector<AblationRow> rows;
  for (Variant v : order) {
    if (log) *log << "ablate: " << variant_label(v) << "\n";
    rows.push_back({v, run_uda(with_variant(cfg, v), ds).target});
  }
  return rows;
}

inline std::string ablation_table(const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  std::size_t w = 5;
  for (const auto& r : rows) w = std::max(w, variant_label(r.variant).size());
  os << std::left << std::setw(static_cast<int>(w)) << "Model" << "  " << std::right << std::setw(8) << "Accuracy" << "  "
     << std::setw(8) << "F1" << "\n";
  os << std::string(w + 20, '-') << "\n";
  os << std::fixed << std::setprecision(4);
  for (const auto& r : rows)
    os << std::left << std::setw(static_cast<int>(w)) << variant_label(r.variant) << "  " << std::right << std::setw(8)
       << r.report.accuracy << "  " << std::setw(8) << r.report.macro_f1 << "\n";
  return os.str();
}

inline std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  os << "variant,accuracy,macro_f1\n" << std::setprecision(17);
  for (const auto& r : rows) {
    std::string name;
    for (const auto& [v, n] : variant_names())
      if (v == r.variant) name = n;
    os << name << "," << r.report.accuracy << "," << r.report.macro_f1 << "\n";
  }
  return os.str();
}

}  // namespace tmknet::experiment

#endif  // TMKNET_EXPERIMENT_HPP
