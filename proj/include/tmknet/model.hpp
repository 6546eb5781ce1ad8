#ifndef TMKNET_MODEL_HPP
#define TMKNET_MODEL_HPP

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "tmknet/autodiff.hpp"
#include "tmknet/error.hpp"
#include "tmknet/optim.hpp"
#include "tmknet/random.hpp"
#include "tmknet/spd_layers.hpp"
#include "tmknet/stem.hpp"

namespace tmknet {

/// How domains map onto SPD batch-norm statistics.
enum class NormMode {
  DomainSpecific,  ///< one set of running statistics per domain
  Shared           ///< a single set for every domain (baseline)
};

struct ModelConfig {
  stem::StemConfig stem;
  layers::BackboneConfig backbone;
  std::size_t window = 0;  ///< samples per trial
  NormMode norm = NormMode::DomainSpecific;
};

inline nlohmann::json to_json(const ModelConfig& m) {
  const auto& s = m.stem;
  const auto& b = m.backbone;
  return {{"stem",
           {{"fs", s.fs},
            {"r_data", s.r_data},
            {"r_resolution", s.r_resolution},
            {"n_t", s.n_t},
            {"n_s", s.n_s},
            {"pool_size", s.pool_size},
            {"leaky_slope", s.leaky_slope},
            {"sensors", s.sensors},
            {"flexor_ids", s.flexor_ids},
            {"extensor_ids", s.extensor_ids},
            {"proximal_ids", s.proximal_ids},
            {"distal_ids", s.distal_ids},
            {"variant",
             {{"multi_resolution", s.variant.multi_resolution},
              {"global", s.variant.global},
              {"flexor", s.variant.flexor},
              {"extensor", s.variant.extensor},
              {"proximal_distal", s.variant.proximal_distal},
              {"dilated", s.variant.dilated}}}}},
          {"backbone",
           {{"cov_floor", b.cov.floor},
            {"cov_trace_scale", b.cov.trace_scale},
            {"eps_reeig", b.eps_reeig},
            {"eps_var", b.eps_var},
            {"n_b", b.n_b},
            {"n_c", b.n_c},
            {"gamma_source_floor", b.gamma_source_floor},
            {"gamma_target_floor", b.gamma_target_floor}}},
          {"window", m.window},
          {"norm", m.norm == NormMode::Shared ? "shared" : "domain_specific"}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  try {
    ModelConfig m;
    const auto& s = j.at("stem");
    m.stem.fs = s.at("fs").get<double>();
    m.stem.r_data = s.at("r_data").get<double>();
    m.stem.r_resolution = s.at("r_resolution").get<std::vector<double>>();
    m.stem.n_t = s.at("n_t").get<std::size_t>();
    m.stem.n_s = s.at("n_s").get<std::size_t>();
    m.stem.pool_size = s.at("pool_size").get<std::size_t>();
    m.stem.leaky_slope = s.at("leaky_slope").get<double>();
    m.stem.sensors = s.at("sensors").get<std::size_t>();
    m.stem.flexor_ids = s.at("flexor_ids").get<std::vector<std::size_t>>();
    m.stem.extensor_ids = s.at("extensor_ids").get<std::vector<std::size_t>>();
    m.stem.proximal_ids = s.at("proximal_ids").get<std::vector<std::size_t>>();
    m.stem.distal_ids = s.at("distal_ids").get<std::vector<std::size_t>>();
    const auto& v = s.at("variant");
    m.stem.variant.multi_resolution = v.at("multi_resolution").get<bool>();
    m.stem.variant.global = v.at("global").get<bool>();
    m.stem.variant.flexor = v.at("flexor").get<bool>();
    m.stem.variant.extensor = v.at("extensor").get<bool>();
    m.stem.variant.proximal_distal = v.at("proximal_distal").get<bool>();
    m.stem.variant.dilated = v.at("dilated").get<bool>();
    const auto& b = j.at("backbone");
    m.backbone.cov.floor = b.at("cov_floor").get<double>();
    m.backbone.cov.trace_scale = b.at("cov_trace_scale").get<double>();
    m.backbone.eps_reeig = b.at("eps_reeig").get<double>();
    m.backbone.eps_var = b.at("eps_var").get<double>();
    m.backbone.n_b = b.at("n_b").get<std::size_t>();
    m.backbone.n_c = b.at("n_c").get<std::size_t>();
    m.backbone.gamma_source_floor = b.at("gamma_source_floor").get<double>();
    m.backbone.gamma_target_floor = b.at("gamma_target_floor").get<double>();
    m.window = j.at("window").get<std::size_t>();
    const std::string norm = j.at("norm").get<std::string>();
    if (norm != "shared" && norm != "domain_specific") throw DataError("model config: unknown norm '" + norm + "'");
    m.norm = norm == "shared" ? NormMode::Shared : NormMode::DomainSpecific;
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("model config: ") + e.what());
  }
}

inline void validate(const ModelConfig& m) {
  stem::validate(m.stem, m.window);
  const auto& b = m.backbone;
  if (!(b.cov.floor > 0.0) || b.cov.trace_scale < 0.0) throw ConfigError("backbone: covariance regularizer must be positive");
  if (!(b.eps_reeig > 0.0) || !(b.eps_var > 0.0)) throw ConfigError("backbone: eps_reeig and eps_var must be positive");
  if (b.n_b == 0 || b.n_b > m.stem.n_s) throw ConfigError("backbone: need 0 < n_b <= n_s");
  if (b.n_c < 2) throw ConfigError("backbone: need at least 2 classes");
  for (double g : {b.gamma_source_floor, b.gamma_target_floor})
    if (!(g >= 0.0 && g <= 1.0)) throw ConfigError("backbone: momentum floors must lie in [0,1]");
}

/// 64-bit FNV-1a, hex encoded.
inline std::string fnv1a_hex(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  static const char* digits = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i, h >>= 4) out[static_cast<std::size_t>(i)] = digits[h & 0xf];
  return out;
}

enum class Pass {
  Train,  ///< batch statistics, running statistics updated
  Eval    ///< stored running statistics
};

/// The full network: MRT -> MSS -> CovPool -> BiMap -> ReEig -> DSBN -> LogEig -> Linear.
class TmkNet {
 public:
  struct Output {
    ad::Var input;
    ad::Var pre_norm;   ///< ReEig output (SPD, before DSBN)
    ad::Var post_norm;  ///< DSBN output (SPD)
    ad::Var logits;
    std::map<std::string, ad::Var> params;
  };

  TmkNet(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)), seed_(seed) {
    validate(cfg_);
    init_params();
    mrt_bn_ = stem::EuclidBatchNorm(cfg_.stem.n_t);
    mss_bn_ = stem::EuclidBatchNorm(cfg_.stem.n_s);
    dsbn_ = layers::DsbnState(cfg_.backbone.gamma_source_floor, cfg_.backbone.gamma_target_floor);
  }

  const ModelConfig& config() const { return cfg_; }
  std::uint64_t seed() const { return seed_; }
  std::string config_hash() const { return fnv1a_hex(to_json(cfg_).dump()); }

  optim::ParamStore& params() { return params_; }
  const optim::ParamStore& params() const { return params_; }
  layers::DsbnState& dsbn() { return dsbn_; }
  const layers::DsbnState& dsbn() const { return dsbn_; }
  stem::EuclidBatchNorm& mrt_bn() { return mrt_bn_; }
  stem::EuclidBatchNorm& mss_bn() { return mss_bn_; }
  const stem::EuclidBatchNorm& mrt_bn() const { return mrt_bn_; }
  const stem::EuclidBatchNorm& mss_bn() const { return mss_bn_; }

  /// Statistics slot used for a dataset domain id.
  int norm_slot(int domain) const { return cfg_.norm == NormMode::Shared ? 0 : domain; }

  void register_domain(int domain, layers::DomainRole role) {
    const int slot = norm_slot(domain);
    if (dsbn_.has(slot)) {
      if (cfg_.norm == NormMode::Shared) return;
      throw StateError("model: domain " + std::to_string(domain) + " registered twice");
    }
    dsbn_.register_domain(slot, cfg_.norm == NormMode::Shared ? layers::DomainRole::Source : role, cfg_.backbone.n_b);
  }

  /// Records a forward pass on `tape`. `x` is (b, 1, c, t).
  Output forward(ad::Tape& tape, const Tensor& x, std::span<const int> domains, Pass pass, bool input_grad = false) {
    return forward(tape, tape.leaf(x, input_grad), domains, pass);
  }

  /// Same, for an input node already on `tape`.
  Output forward(ad::Tape& tape, const ad::Var& x, std::span<const int> domains, Pass pass) {
    Output out;
    out.input = x;
    for (const auto& e : params_.entries()) out.params[e.name] = tape.leaf(e.value, true);
    const ad::Var h = spd_features(out, pass == Pass::Train);
    out.pre_norm = h;
    const std::vector<int> slots = slots_of(domains);
    const ad::Var v_phi = ad::exp(out.params.at("dsbn.log_dispersion"));
    out.post_norm = layers::dsbn_forward(h, slots, dsbn_, pass == Pass::Train ? layers::DsbnMode::Train : layers::DsbnMode::Eval,
                                         out.params.at("dsbn.bias_mean"), v_phi, cfg_.backbone.eps_var);
    out.logits = layers::classify(layers::logeig(out.post_norm), out.params.at("head.weight"), out.params.at("head.bias"));
    return out;
  }

  /// Updates the running SPD statistics of the given domains from an unlabeled
  /// batch; the stem runs in evaluation mode and nothing else changes.
  void adapt_batch(const Tensor& x, std::span<const int> domains) {
    ad::Tape tape;
    Output out;
    out.input = tape.constant(x);
    for (const auto& e : params_.entries()) out.params[e.name] = tape.constant(e.value);
    const ad::Var h = spd_features(out, false);
    layers::dsbn_adapt(h.value(), slots_of(domains), dsbn_);
  }

 private:
  std::vector<int> slots_of(std::span<const int> domains) const {
    std::vector<int> s(domains.begin(), domains.end());
    for (int& d : s) d = norm_slot(d);
    return s;
  }

  ad::Var spd_features(const Output& out, bool training) {
    const auto& p = out.params;
    stem::MrtWeights mw;
    const auto ks = stem::temporal_kernels(cfg_.stem);
    for (std::size_t i = 0; i < ks.size(); ++i) {
      mw.kernels.push_back(p.at("mrt.k" + std::to_string(i) + ".weight"));
      mw.biases.push_back(p.at("mrt.k" + std::to_string(i) + ".bias"));
    }
    mw.bn_gamma = p.at("mrt.bn.gamma");
    mw.bn_beta = p.at("mrt.bn.beta");
    const ad::Var zt = stem::mrt_forward(out.input, cfg_.stem, mw, mrt_bn_, training);

    stem::MssWeights sw;
    auto opt = [&](const char* name) { return p.count(name) ? p.at(name) : ad::Var(); };
    sw.global_w = opt("mss.global.weight");
    sw.global_b = opt("mss.global.bias");
    sw.flexor_w = opt("mss.flexor.weight");
    sw.flexor_b = opt("mss.flexor.bias");
    sw.extensor_w = opt("mss.extensor.weight");
    sw.extensor_b = opt("mss.extensor.bias");
    sw.pd_w = opt("mss.proximal_distal.weight");
    sw.pd_b = opt("mss.proximal_distal.bias");
    sw.dilated_w = opt("mss.dilated.weight");
    sw.dilated_b = opt("mss.dilated.bias");
    sw.bn_gamma = p.at("mss.bn.gamma");
    sw.bn_beta = p.at("mss.bn.beta");
    const ad::Var zs = stem::mss_forward(zt, cfg_.stem, sw, mss_bn_, training);

    const ad::Var c = layers::cov_pool(zs, cfg_.backbone.cov);
    const ad::Var hb = layers::bimap(c, p.at("bimap.weight"));
    return layers::reeig(hb, cfg_.backbone.eps_reeig);
  }

  void init_params() {
    using optim::Manifold;
    using optim::Role;
    Rng rng(mix_seed(seed_, 0x1417));
    const auto& s = cfg_.stem;
    auto conv = [&](const std::string& name, Shape shape) {
      const double fan_in = static_cast<double>(shape[1] * shape[2] * shape[3]);
      const std::size_t out = shape[0];
      params_.add(name + ".weight", Manifold::Euclidean, Role::Weight, rng.normal_tensor(std::move(shape), 1.0 / std::sqrt(fan_in)));
      params_.add(name + ".bias", Manifold::Euclidean, Role::Bias, Tensor({out}));
    };
    auto norm = [&](const std::string& name, std::size_t ch) {
      params_.add(name + ".gamma", Manifold::Euclidean, Role::NormAffine, Tensor({ch}, 1.0));
      params_.add(name + ".beta", Manifold::Euclidean, Role::NormAffine, Tensor({ch}));
    };
    const auto ks = stem::temporal_kernels(s);
    for (std::size_t i = 0; i < ks.size(); ++i) conv("mrt.k" + std::to_string(i), {s.n_t, 1, 1, ks[i]});
    norm("mrt.bn", s.n_t);
    const std::size_t half = s.sensors / 2;
    if (s.variant.global) conv("mss.global", {s.n_s, s.n_t, s.sensors, 1});
    if (s.variant.flexor) conv("mss.flexor", {s.n_s, s.n_t, half, 1});
    if (s.variant.extensor) conv("mss.extensor", {s.n_s, s.n_t, half, 1});
    if (s.variant.proximal_distal) conv("mss.proximal_distal", {s.n_s, s.n_t, half, 1});
    if (s.variant.dilated) conv("mss.dilated", {s.n_s, s.n_t, 2, 1});
    norm("mss.bn", s.n_s);
    const auto& b = cfg_.backbone;
    params_.add("bimap.weight", Manifold::Stiefel, Role::Manifold, optim::random_stiefel(b.n_b, s.n_s, rng));
    params_.add("dsbn.bias_mean", Manifold::Spd, Role::Manifold, Tensor::identity(b.n_b));
    params_.add("dsbn.log_dispersion", Manifold::LogScalar, Role::Manifold, Tensor::scalar(0.0));
    const double fan = static_cast<double>(b.n_b * b.n_b);
    params_.add("head.weight", Manifold::Euclidean, Role::Weight, rng.normal_tensor({b.n_c, b.n_b * b.n_b}, 1.0 / std::sqrt(fan)));
    params_.add("head.bias", Manifold::Euclidean, Role::Bias, Tensor({b.n_c}));
  }

  ModelConfig cfg_;
  std::uint64_t seed_;
  optim::ParamStore params_;
  stem::EuclidBatchNorm mrt_bn_, mss_bn_;
  layers::DsbnState dsbn_;

  friend void save_checkpoint(const TmkNet&, const std::filesystem::path&, const nlohmann::json&);
  friend TmkNet load_checkpoint(const std::filesystem::path&, nlohmann::json*);
};

// ---------------------------------------------------------------------------
// Checkpoints: "TMKNETCK" | u32 version | u64 header length | header JSON | f64 LE payload

inline constexpr char kCheckpointMagic[8] = {'T', 'M', 'K', 'N', 'E', 'T', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

template <class T>
void put_le(std::string& out, T v) {
  using U = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::uint32_t>;
  const U bits = std::bit_cast<U>(v);
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>(bits >> (8 * i) & 0xff));
}

template <class T>
T get_le(const std::string& in, std::size_t pos) {
  using U = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::uint32_t>;
  if (pos + sizeof(U) > in.size()) throw DataError("checkpoint: truncated");
  U bits = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) bits |= static_cast<U>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  return std::bit_cast<T>(bits);
}

}  // namespace detail

/// Writes parameters, batch-norm buffers and per-domain SPD statistics. `extra`
/// is stored verbatim in the header (e.g. run metadata).
inline void save_checkpoint(const TmkNet& net, const std::filesystem::path& path, const nlohmann::json& extra = nlohmann::json::object()) {
  std::string payload;
  nlohmann::json table = nlohmann::json::array();
  auto put_tensor = [&](nlohmann::json entry, const Tensor& t) {
    entry["shape"] = t.shape();
    entry["offset"] = payload.size();
    for (double v : t.data()) detail::put_le(payload, v);
    table.push_back(std::move(entry));
  };
  for (const auto& e : net.params_.entries())
    put_tensor({{"kind", "param"}, {"name", e.name}, {"manifold", optim::manifold_name(e.manifold)}, {"role", static_cast<int>(e.role)}},
               e.value);
  auto put_bn = [&](const char* name, const stem::EuclidBatchNorm& bn) {
    const std::size_t ch = bn.running_mean.size();
    put_tensor({{"kind", "buffer"}, {"name", std::string(name) + ".running_mean"}}, Tensor({ch}, bn.running_mean));
    put_tensor({{"kind", "buffer"}, {"name", std::string(name) + ".running_var"}}, Tensor({ch}, bn.running_var));
  };
  put_bn("mrt.bn", net.mrt_bn_);
  put_bn("mss.bn", net.mss_bn_);
  nlohmann::json domains = nlohmann::json::array();
  for (const auto& [id, st] : net.dsbn_.domains()) {
    put_tensor({{"kind", "dsbn"}, {"name", "dsbn.running_mean." + std::to_string(id)}}, st.mean);
    domains.push_back({{"id", id},
                       {"role", st.role == layers::DomainRole::Source ? "source" : "target"},
                       {"std", st.std},
                       {"steps", st.steps}});
  }
  nlohmann::json header{{"config", to_json(net.cfg_)},
                        {"config_hash", net.config_hash()},
                        {"seed", net.seed_},
                        {"tensors", table},
                        {"dsbn_domains", domains},
                        {"bn_initialized", {net.mrt_bn_.initialized, net.mss_bn_.initialized}},
                        {"extra", extra}};
  // Doubles are emitted with round-trip precision by the JSON writer.
  const std::string h = header.dump();
  std::string out(kCheckpointMagic, kCheckpointMagic + 8);
  detail::put_le(out, kCheckpointVersion);
  detail::put_le(out, static_cast<std::uint64_t>(h.size()));
  out += h;
  out += payload;
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write checkpoint " + path.string());
  os.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!os) throw DataError("write failed for checkpoint " + path.string());
}

inline TmkNet load_checkpoint(const std::filesystem::path& path, nlohmann::json* extra = nullptr) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open checkpoint " + path.string());
  const std::string in((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  if (in.size() < 20 || std::memcmp(in.data(), kCheckpointMagic, 8) != 0) throw DataError(path.string() + ": not a checkpoint");
  const auto version = detail::get_le<std::uint32_t>(in, 8);
  if (version != kCheckpointVersion) throw DataError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
  const auto hlen = detail::get_le<std::uint64_t>(in, 12);
  if (20 + hlen > in.size()) throw DataError(path.string() + ": truncated header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(in.substr(20, hlen));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string() + ": corrupt header: " + e.what());
  }
  const std::size_t base = 20 + hlen;
  try {
    TmkNet net(model_config_from_json(header.at("config")), header.at("seed").get<std::uint64_t>());
    if (header.at("config_hash").get<std::string>() != net.config_hash()) throw DataError(path.string() + ": config hash mismatch");
    std::map<std::string, Tensor> tensors;
    for (const auto& e : header.at("tensors")) {
      const Shape shape = e.at("shape").get<Shape>();
      const std::size_t off = e.at("offset").get<std::size_t>();
      Tensor t(shape);
      for (std::size_t i = 0; i < t.size(); ++i) t[i] = detail::get_le<double>(in, base + off + 8 * i);
      tensors[e.at("name").get<std::string>()] = std::move(t);
    }
    for (auto& e : net.params_.entries()) {
      auto it = tensors.find(e.name);
      if (it == tensors.end()) throw DataError(path.string() + ": missing parameter '" + e.name + "'");
      if (it->second.shape() != e.value.shape()) throw DataError(path.string() + ": shape mismatch for '" + e.name + "'");
      e.value = it->second;
    }
    auto get_bn = [&](const std::string& name, stem::EuclidBatchNorm& bn, bool init) {
      const Tensor& m = tensors.at(name + ".running_mean");
      const Tensor& v = tensors.at(name + ".running_var");
      bn.running_mean.assign(m.data().begin(), m.data().end());
      bn.running_var.assign(v.data().begin(), v.data().end());
      bn.initialized = init;
    };
    const auto init = header.at("bn_initialized");
    get_bn("mrt.bn", net.mrt_bn_, init.at(0).get<bool>());
    get_bn("mss.bn", net.mss_bn_, init.at(1).get<bool>());
    for (const auto& d : header.at("dsbn_domains")) {
      const int id = d.at("id").get<int>();
      const auto role = d.at("role").get<std::string>() == "source" ? layers::DomainRole::Source : layers::DomainRole::Target;
      net.dsbn_.register_domain(id, role, net.cfg_.backbone.n_b);
      auto& st = net.dsbn_.stats(id);
      st.mean = tensors.at("dsbn.running_mean." + std::to_string(id));
      st.std = d.at("std").get<double>();
      st.steps = d.at("steps").get<std::int64_t>();
    }
    if (extra) *extra = header.value("extra", nlohmann::json::object());
    return net;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string() + ": malformed header: " + e.what());
  } catch (const std::out_of_range&) {
    throw DataError(path.string() + ": header references a missing tensor");
  }
}

}  // namespace tmknet

#endif  // TMKNET_MODEL_HPP
