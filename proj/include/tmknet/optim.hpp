#ifndef TMKNET_OPTIM_HPP
#define TMKNET_OPTIM_HPP

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "tmknet/error.hpp"
#include "tmknet/linalg.hpp"
#include "tmknet/random.hpp"
#include "tmknet/spd.hpp"
#include "tmknet/tensor.hpp"

namespace tmknet::optim {

/// Geometry a parameter lives on; drives how the optimizer moves it.
enum class Manifold { Euclidean, Stiefel, Spd, LogScalar };

inline std::string_view manifold_name(Manifold m) {
  switch (m) {
    case Manifold::Euclidean: return "euclidean";
    case Manifold::Stiefel: return "stiefel";
    case Manifold::Spd: return "spd";
    case Manifold::LogScalar: return "log_scalar";
  }
  return "?";
}

inline Manifold manifold_from_name(std::string_view s) {
  if (s == "euclidean") return Manifold::Euclidean;
  if (s == "stiefel") return Manifold::Stiefel;
  if (s == "spd") return Manifold::Spd;
  if (s == "log_scalar") return Manifold::LogScalar;
  throw DataError("unknown manifold tag '" + std::string(s) + "'");
}

/// What a parameter is used for; decides weight decay.
enum class Role { Weight, Bias, NormAffine, Manifold };

struct ParamEntry {
  std::string name;
  Manifold manifold = Manifold::Euclidean;
  Role role = Role::Weight;
  Tensor value;
  Tensor first_moment;      // ambient / tangent coordinates
  Tensor second_moment;     // elementwise (Euclidean, Stiefel, LogScalar)
  double second_moment_scalar = 0.0;  // metric norm (SPD)
  std::int64_t step = 0;
};

/// Decoupled weight-decay coefficient: only Euclidean conv/linear weights decay.
inline double weight_decay_for(Manifold manifold, Role role, double base) {
  return manifold == Manifold::Euclidean && role == Role::Weight ? base : 0.0;
}

/// Named parameters in insertion order.
class ParamStore {
 public:
  void add(std::string name, Manifold manifold, Role role, Tensor value) {
    if (index_.count(name)) throw ConfigError("ParamStore: duplicate parameter '" + name + "'");
    ParamEntry e;
    e.name = name;
    e.manifold = manifold;
    e.role = manifold == Manifold::Euclidean ? role : Role::Manifold;
    e.first_moment = Tensor(value.shape());
    e.second_moment = Tensor(value.shape());
    e.value = std::move(value);
    index_.emplace(std::move(name), entries_.size());
    entries_.push_back(std::move(e));
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  ParamEntry& entry(const std::string& name) { return entries_.at(find(name)); }
  const ParamEntry& entry(const std::string& name) const { return entries_.at(find(name)); }
  Tensor& value(const std::string& name) { return entry(name).value; }
  const Tensor& value(const std::string& name) const { return entry(name).value; }

  std::vector<ParamEntry>& entries() { return entries_; }
  const std::vector<ParamEntry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

 private:
  std::size_t find(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("ParamStore: no parameter named '" + name + "'");
    return it->second;
  }
  std::vector<ParamEntry> entries_;
  std::map<std::string, std::size_t> index_;
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
};

/// Tangent projection at a row-orthonormal W: G - sym(G W^T) W.
inline Tensor stiefel_project(const Tensor& w, const Tensor& g) {
  const Tensor gwt = matmul(g, transpose(w));
  return g - matmul(symmetrize(gwt), w);
}

/// QR-type retraction: Gram-Schmidt on the rows (two passes), i.e. Q of QR(M^T) with positive diag(R).
inline Tensor stiefel_retract(const Tensor& m) {
  require_matrix(m, "stiefel_retract");
  const std::size_t p = m.dim(0), n = m.dim(1);
  if (p > n) throw ShapeError("stiefel_retract: more rows than columns");
  Tensor q = m;
  for (std::size_t i = 0; i < p; ++i) {
    double orig = 0.0;
    for (std::size_t k = 0; k < n; ++k) orig += q[i * n + k] * q[i * n + k];
    orig = std::sqrt(orig);
    for (int pass = 0; pass < 2; ++pass)
      for (std::size_t j = 0; j < i; ++j) {
        double d = 0.0;
        for (std::size_t k = 0; k < n; ++k) d += q[i * n + k] * q[j * n + k];
        for (std::size_t k = 0; k < n; ++k) q[i * n + k] -= d * q[j * n + k];
      }
    double nrm = 0.0;
    for (std::size_t k = 0; k < n; ++k) nrm += q[i * n + k] * q[i * n + k];
    nrm = std::sqrt(nrm);
    if (!(nrm > 1e-12 * std::max(orig, 1e-300))) throw NumericalError("stiefel_retract: rank loss");
    for (std::size_t k = 0; k < n; ++k) q[i * n + k] /= nrm;
  }
  return q;
}

/// Random row-orthonormal (p, n) matrix.
inline Tensor random_stiefel(std::size_t p, std::size_t n, Rng& rng) {
  return stiefel_retract(rng.normal_tensor({p, n}));
}

inline double stiefel_defect(const Tensor& w) {
  return frobenius_norm(matmul(w, transpose(w)) - Tensor::identity(w.dim(0)));
}

namespace detail {

inline bool all_zero(const Tensor& t) {
  for (double v : t.data())
    if (v != 0.0) return false;
  return true;
}

inline void euclidean_adam(ParamEntry& e, const Tensor& g, const AdamConfig& c, double decay) {
  const double b1 = 1.0 - std::pow(c.beta1, static_cast<double>(e.step));
  const double b2 = 1.0 - std::pow(c.beta2, static_cast<double>(e.step));
  if (decay != 0.0) e.value *= 1.0 - c.lr * decay;
  for (std::size_t i = 0; i < g.size(); ++i) {
    e.first_moment[i] = c.beta1 * e.first_moment[i] + (1.0 - c.beta1) * g[i];
    e.second_moment[i] = c.beta2 * e.second_moment[i] + (1.0 - c.beta2) * g[i] * g[i];
    const double mh = e.first_moment[i] / b1;
    const double vh = e.second_moment[i] / b2;
    e.value[i] -= c.lr * mh / (std::sqrt(vh) + c.eps);
  }
}

inline void stiefel_adam(ParamEntry& e, const Tensor& g, const AdamConfig& c) {
  const double b1 = 1.0 - std::pow(c.beta1, static_cast<double>(e.step));
  const double b2 = 1.0 - std::pow(c.beta2, static_cast<double>(e.step));
  const Tensor rg = stiefel_project(e.value, g);
  Tensor dir(rg.shape());
  for (std::size_t i = 0; i < rg.size(); ++i) {
    e.first_moment[i] = c.beta1 * e.first_moment[i] + (1.0 - c.beta1) * rg[i];
    e.second_moment[i] = c.beta2 * e.second_moment[i] + (1.0 - c.beta2) * rg[i] * rg[i];
    dir[i] = (e.first_moment[i] / b1) / (std::sqrt(e.second_moment[i] / b2) + c.eps);
  }
  dir = stiefel_project(e.value, dir);
  if (all_zero(dir)) return;
  e.value = stiefel_retract(e.value - dir * c.lr);
  e.first_moment = stiefel_project(e.value, e.first_moment);
}

inline void spd_adam(ParamEntry& e, const Tensor& g, const AdamConfig& c) {
  const double b1 = 1.0 - std::pow(c.beta1, static_cast<double>(e.step));
  const double b2 = 1.0 - std::pow(c.beta2, static_cast<double>(e.step));
  const Tensor& x = e.value;
  const Tensor egrad = symmetrize(g);
  const Tensor rg = symmetrize(matmul(matmul(x, egrad), x));
  const double sq = trace(matmul(matmul(egrad, x), matmul(egrad, x)));
  e.first_moment = e.first_moment * c.beta1 + rg * (1.0 - c.beta1);
  e.second_moment_scalar = c.beta2 * e.second_moment_scalar + (1.0 - c.beta2) * sq;
  const Tensor dir = e.first_moment * (1.0 / b1) * (1.0 / (std::sqrt(e.second_moment_scalar / b2) + c.eps));
  if (all_zero(dir)) return;
  const Tensor next = spd::exp_map(x, dir * (-c.lr));
  e.first_moment = spd::parallel_transport({e.first_moment, x}, next).vector;
  e.value = next;
}

}  // namespace detail

/// One Riemannian Adam step. `grads` holds ambient Euclidean gradients by name;
/// missing names are treated as zero. Throws before touching the store if any gradient is non-finite.
inline void adam_step(ParamStore& store, const std::map<std::string, Tensor>& grads, const AdamConfig& cfg) {
  for (const auto& [name, g] : grads) {
    const ParamEntry& e = store.entry(name);
    if (g.shape() != e.value.shape())
      throw ShapeError("adam_step: gradient for '" + name + "' has shape " + shape_str(g.shape()) + ", expected " +
                       shape_str(e.value.shape()));
    if (!g.all_finite()) throw NumericalError("adam_step: non-finite gradient for '" + name + "'");
  }
  for (ParamEntry& e : store.entries()) {
    ++e.step;
    auto it = grads.find(e.name);
    const Tensor g = it == grads.end() ? Tensor(e.value.shape()) : it->second;
    switch (e.manifold) {
      case Manifold::Euclidean:
        detail::euclidean_adam(e, g, cfg, weight_decay_for(e.manifold, e.role, cfg.weight_decay));
        break;
      case Manifold::LogScalar:
        detail::euclidean_adam(e, g, cfg, 0.0);
        break;
      case Manifold::Stiefel:
        detail::stiefel_adam(e, g, cfg);
        break;
      case Manifold::Spd:
        detail::spd_adam(e, g, cfg);
        break;
    }
    if (!e.value.all_finite()) throw NumericalError("adam_step: parameter '" + e.name + "' became non-finite");
  }
}

}  // namespace tmknet::optim

#endif  // TMKNET_OPTIM_HPP
