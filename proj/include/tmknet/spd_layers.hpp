#ifndef TMKNET_SPD_LAYERS_HPP
#define TMKNET_SPD_LAYERS_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numbers>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "tmknet/autodiff.hpp"
#include "tmknet/error.hpp"
#include "tmknet/linalg.hpp"
#include "tmknet/spd.hpp"
#include "tmknet/tensor.hpp"

/// Riemannian backbone: covariance pooling, BiMap, ReEig, domain-specific SPD
/// batch normalization, LogEig and the linear head.
namespace tmknet::layers {

using ad::Var;

struct BackboneConfig {
  ad::CovRegularizer cov{};
  double eps_reeig = 1e-4;
  double eps_var = 1e-5;
  std::size_t n_b = 30;
  std::size_t n_c = 2;
  double gamma_source_floor = 0.1;
  double gamma_target_floor = 0.05;
};

/// (b, n_s, c_s, t_t) -> (b, n_s, n_s) regularized covariances.
inline Var cov_pool(const Var& z, ad::CovRegularizer reg) {
  const Shape& s = z.shape();
  if (s.size() != 4) throw ShapeError("cov_pool: expected (b,n_s,c_s,t_t), got " + shape_str(s));
  if (s[2] * s[3] < 2) throw ShapeError("cov_pool: need c_s * t_t >= 2");
  return ad::covariance(ad::reshape(z, {s[0], s[1], s[2] * s[3]}), reg);
}

/// W C W^T per sample for a full-row-rank (n_b, n_s) W.
inline Var bimap(const Var& c, const Var& w) {
  const Tensor& wv = w.value();
  require_matrix(wv, "bimap");
  if (wv.dim(0) > wv.dim(1)) throw ShapeError("bimap: W must have at most as many rows as columns");
  const SymEig gram = sym_eig(matmul(wv, transpose(wv)));
  if (!(gram.values.front() > 1e-10)) throw NumericalError("bimap: W is rank deficient");
  return ad::congruence(w, c);
}

/// Eigenvalue rectification max(eps, lambda).
inline Var reeig(const Var& h, double eps) { return ad::sym_fn(h, SpectralFn::clamp_min(eps)); }

/// Matrix logarithm per sample.
inline Var logeig(const Var& h) { return ad::sym_fn(h, SpectralFn::log()); }

namespace detail {
inline Var as_batch(const Var& m) {
  const Shape& s = m.shape();
  return ad::reshape(m, {1, s[0], s[1]});
}
inline Var as_matrix(const Var& b) {
  const Shape& s = b.shape();
  return ad::reshape(b, {s[1], s[2]});
}
}  // namespace detail

/// G_phi^{1/2} (G_ref^{-1/2} Z G_ref^{-1/2})^p G_phi^{1/2} with p = V_phi / (V_ref + eps_var).
inline Var spdbn_normalize(const Var& z, const Var& g_ref, const Var& v_ref, const Var& g_phi, const Var& v_phi, double eps_var) {
  const Var ref_isqrt = detail::as_matrix(ad::sym_fn(detail::as_batch(g_ref), SpectralFn::inv_sqrt()));
  const Var centered = ad::congruence(ref_isqrt, z);
  const Var p = ad::div(v_phi, ad::add_const(v_ref, eps_var));
  const Var powered = ad::sym_pow(centered, p);
  const Var bias_sqrt = detail::as_matrix(ad::sym_fn(detail::as_batch(g_phi), SpectralFn::sqrt()));
  return ad::congruence(bias_sqrt, powered);
}

/// Batch Frechet statistics: one Karcher step from the identity (log-Euclidean
/// mean) and the dispersion V_B = sqrt(mean_j d^2(G_B, Z_j)).
struct BatchStats {
  Var mean;  ///< (n,n)
  Var std;   ///< scalar
};

inline BatchStats batch_statistics(const Var& h) {
  const Shape& s = h.shape();
  if (s.size() != 3 || s[0] == 0) throw ShapeError("batch_statistics: expected a non-empty (K,n,n) batch");
  const Var logs = ad::sym_fn(h, SpectralFn::log());
  const Var g = detail::as_matrix(ad::sym_fn(detail::as_batch(ad::mean_axis0(logs)), SpectralFn::exp()));
  const Var g_isqrt = detail::as_matrix(ad::sym_fn(detail::as_batch(g), SpectralFn::inv_sqrt()));
  const Var dev = ad::sym_fn(ad::congruence(g_isqrt, h), SpectralFn::log());
  const Var var = ad::scale(ad::sum(ad::square(dev)), 1.0 / static_cast<double>(s[0]));
  return {g, ad::sqrt(var)};
}

enum class DomainRole { Source, Target };

struct DomainStats {
  DomainRole role = DomainRole::Source;
  Tensor mean;         ///< running Frechet mean G_run
  double std = 1.0;    ///< running dispersion V_run
  std::int64_t steps = 0;
};

/// Per-domain running statistics of the domain-specific SPD batch norm.
class DsbnState {
 public:
  DsbnState() = default;
  DsbnState(double gamma_source_floor, double gamma_target_floor)
      : gamma_source_floor_(gamma_source_floor), gamma_target_floor_(gamma_target_floor) {}

  void register_domain(int id, DomainRole role, std::size_t n) {
    if (domains_.count(id)) throw StateError("DSBN: domain " + std::to_string(id) + " registered twice");
    domains_[id] = DomainStats{role, Tensor::identity(n), 1.0, 0};
  }

  bool has(int id) const { return domains_.count(id) != 0; }

  const DomainStats& stats(int id) const {
    auto it = domains_.find(id);
    if (it == domains_.end()) throw StateError("DSBN: unknown domain id " + std::to_string(id));
    return it->second;
  }
  DomainStats& stats(int id) { return const_cast<DomainStats&>(std::as_const(*this).stats(id)); }

  bool initialized(int id) const { return stats(id).steps > 0; }

  /// Momentum for update number s (1-based): max(floor, 1/s).
  double gamma(int id, std::int64_t s) const {
    const double floor = stats(id).role == DomainRole::Source ? gamma_source_floor_ : gamma_target_floor_;
    return std::max(floor, 1.0 / static_cast<double>(s));
  }

  /// G_run <- G_run #_gamma G_B, V_run <- (1-gamma) V_run + gamma V_B.
  void update(int id, const Tensor& batch_mean, double batch_std) {
    DomainStats& d = stats(id);
    const double g = gamma(id, d.steps + 1);
    d.mean = spd::geo_mean(d.mean, batch_mean, g);
    d.std = (1.0 - g) * d.std + g * batch_std;
    ++d.steps;
  }

  const std::map<int, DomainStats>& domains() const { return domains_; }
  std::map<int, DomainStats>& domains() { return domains_; }
  double gamma_source_floor() const { return gamma_source_floor_; }
  double gamma_target_floor() const { return gamma_target_floor_; }

 private:
  std::map<int, DomainStats> domains_;
  double gamma_source_floor_ = 0.1;
  double gamma_target_floor_ = 0.05;
};

enum class DsbnMode { Train, Eval };

namespace detail {
struct Groups {
  std::vector<int> ids;
  std::vector<std::vector<std::size_t>> members;
};

inline Groups group_by_domain(std::span<const int> domains) {
  Groups g;
  for (std::size_t i = 0; i < domains.size(); ++i) {
    auto it = std::find(g.ids.begin(), g.ids.end(), domains[i]);
    if (it == g.ids.end()) {
      g.ids.push_back(domains[i]);
      g.members.push_back({i});
    } else {
      g.members[static_cast<std::size_t>(it - g.ids.begin())].push_back(i);
    }
  }
  return g;
}
}  // namespace detail

/// Domain-specific SPD momentum batch norm. Train: each domain group is
/// normalized with its own batch statistics (differentiated through) and the
/// group's running statistics are updated out of band. Eval: each group uses its
/// stored running statistics as constants. Output order matches the input.
inline Var dsbn_forward(const Var& h, std::span<const int> domains, DsbnState& state, DsbnMode mode, const Var& g_phi,
                        const Var& v_phi, double eps_var) {
  const Shape& s = h.shape();
  if (s.size() != 3 || s[0] != domains.size())
    throw ShapeError("dsbn_forward: batch " + shape_str(s) + " vs " + std::to_string(domains.size()) + " domain ids");
  ad::Tape& tape = *h.tape();
  const detail::Groups groups = detail::group_by_domain(domains);
  for (int id : groups.ids) {
    if (!state.has(id)) throw StateError("dsbn_forward: unknown domain id " + std::to_string(id));
    if (mode == DsbnMode::Eval && !state.initialized(id))
      throw StateError("dsbn_forward: statistics of domain " + std::to_string(id) + " were never trained or adapted");
  }
  std::vector<Var> outputs;
  std::vector<std::size_t> order;
  for (std::size_t gi = 0; gi < groups.ids.size(); ++gi) {
    const int id = groups.ids[gi];
    const auto& members = groups.members[gi];
    const Var part = groups.ids.size() == 1 ? h : ad::index_select(h, 0, members);
    if (mode == DsbnMode::Train) {
      if (members.size() < 2)
        throw ShapeError("dsbn_forward: training needs at least 2 samples of domain " + std::to_string(id));
      const BatchStats bs = batch_statistics(part);
      outputs.push_back(spdbn_normalize(part, bs.mean, bs.std, g_phi, v_phi, eps_var));
      state.update(id, bs.mean.value(), bs.std.value()[0]);
    } else {
      const DomainStats& st = state.stats(id);
      outputs.push_back(spdbn_normalize(part, tape.constant(st.mean), tape.constant(Tensor::scalar(st.std)), g_phi, v_phi, eps_var));
    }
    order.insert(order.end(), members.begin(), members.end());
  }
  if (outputs.size() == 1) return outputs[0];
  const Var joined = ad::concat(outputs, 0);
  std::vector<std::size_t> inverse(order.size());
  for (std::size_t i = 0; i < order.size(); ++i) inverse[order[i]] = i;
  return ad::index_select(joined, 0, inverse);
}

/// Statistics-only pass for unlabeled (target) data: updates each present
/// domain's running statistics from the batch; nothing is differentiated or returned.
inline void dsbn_adapt(const Tensor& h, std::span<const int> domains, DsbnState& state) {
  if (h.rank() != 3 || h.dim(0) != domains.size()) throw ShapeError("dsbn_adapt: batch/domain-id mismatch");
  const detail::Groups groups = detail::group_by_domain(domains);
  for (std::size_t gi = 0; gi < groups.ids.size(); ++gi) {
    const int id = groups.ids[gi];
    if (!state.has(id)) throw StateError("dsbn_adapt: unknown domain id " + std::to_string(id));
    if (groups.members[gi].size() < 2)
      throw ShapeError("dsbn_adapt: need at least 2 samples of domain " + std::to_string(id));
    ad::Tape tape;
    const Var part = ad::index_select(tape.constant(h), 0, groups.members[gi]);
    const BatchStats bs = batch_statistics(part);
    state.update(id, bs.mean.value(), bs.std.value()[0]);
  }
}

/// Logits = flatten(h_log) W^T + bias, with W (n_c, n_b^2).
inline Var classify(const Var& h_log, const Var& w, const Var& bias) {
  const Shape& s = h_log.shape();
  if (s.size() != 3) throw ShapeError("classify: expected (b,n_b,n_b)");
  if (w.shape().size() != 2 || w.shape()[1] != s[1] * s[2])
    throw ShapeError("classify: head weight " + shape_str(w.shape()) + " does not match n_b^2 = " + std::to_string(s[1] * s[2]));
  return ad::linear(ad::reshape(h_log, {s[0], s[1] * s[2]}), w, bias);
}

/// Upper-triangular vectorization (row-major, i <= j) with sqrt(2) on off-diagonals;
/// preserves the Frobenius inner product.
inline std::vector<double> vectorize_upper(const Tensor& m) {
  require_square(m, "vectorize_upper");
  const std::size_t n = m.dim(0);
  std::vector<double> out;
  out.reserve(n * (n + 1) / 2);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i; j < n; ++j) out.push_back(i == j ? m.at(i, j) : std::numbers::sqrt2 * m.at(i, j));
  return out;
}

}  // namespace tmknet::layers

#endif  // TMKNET_SPD_LAYERS_HPP
