#ifndef TMKNET_SPD_HPP
#define TMKNET_SPD_HPP

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "tmknet/error.hpp"
#include "tmknet/linalg.hpp"
#include "tmknet/tensor.hpp"

/// Riemannian geometry of the SPD manifold under the affine-invariant metric.
namespace tmknet::spd {

/// Throws unless `m` is square, symmetric (1e-10 relative) and positive definite.
inline void require_spd(const Tensor& m, const char* who) {
  require_square(m, who);
  if (!m.all_finite()) throw NumericalError(std::string(who) + ": non-finite matrix");
  const std::size_t n = m.dim(0);
  double norm = 0.0, asym = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      norm += m[i * n + j] * m[i * n + j];
      const double d = m[i * n + j] - m[j * n + i];
      asym += d * d;
    }
  if (std::sqrt(asym) > 1e-10 * std::sqrt(norm)) throw NumericalError(std::string(who) + ": matrix is not symmetric");
  const SymEig e = sym_eig(m);
  if (n > 0 && !(e.values.front() > 0.0))
    throw NumericalError(std::string(who) + ": matrix is not positive definite (min eigenvalue " +
                         std::to_string(e.values.front()) + ")");
}

inline bool is_spd(const Tensor& m) {
  try {
    require_spd(m, "is_spd");
    return true;
  } catch (const Error&) {
    return false;
  }
}

inline double min_eigenvalue(const Tensor& m) { return sym_eig(m).values.front(); }

inline void require_same_size(const Tensor& a, const Tensor& b, const char* who) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(who) + ": dimension mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

/// Symmetric square root and inverse square root from one eigendecomposition.
struct SqrtPair {
  Tensor sqrt;
  Tensor inv_sqrt;
};

inline SqrtPair sqrt_pair(const Tensor& z) {
  const SymEig e = sym_eig(z);
  return {tmknet::sym_fn(e, SpectralFn::sqrt()), tmknet::sym_fn(e, SpectralFn::inv_sqrt())};
}

/// Affine-invariant distance ||log(z1^{-1/2} z2 z1^{-1/2})||_F.
inline double airm_dist(const Tensor& z1, const Tensor& z2) {
  require_same_size(z1, z2, "airm_dist");
  require_spd(z1, "airm_dist");
  require_spd(z2, "airm_dist");
  const Tensor isq = tmknet::sym_fn(z1, SpectralFn::inv_sqrt());
  const SymEig e = sym_eig(symmetrize(congruence(isq, z2)));
  double s = 0.0;
  for (double l : e.values) {
    if (!(l > 0.0)) throw NumericalError("airm_dist: lost positive definiteness");
    s += std::log(l) * std::log(l);
  }
  return std::sqrt(s);
}

/// Weighted geometric mean z1 #_w z2; exact endpoints at w = 0 and w = 1.
inline Tensor geo_mean(const Tensor& z1, const Tensor& z2, double w) {
  require_same_size(z1, z2, "geo_mean");
  if (!(w >= 0.0 && w <= 1.0)) throw ShapeError("geo_mean: weight must lie in [0,1]");
  require_spd(z1, "geo_mean");
  require_spd(z2, "geo_mean");
  if (w == 0.0) return z1;
  if (w == 1.0) return z2;
  const SqrtPair r = sqrt_pair(z1);
  const Tensor inner = tmknet::sym_fn(symmetrize(congruence(r.inv_sqrt, z2)), SpectralFn::pow(w));
  return symmetrize(congruence(r.sqrt, inner));
}

/// Riemannian log map at g: g^{1/2} log(g^{-1/2} z g^{-1/2}) g^{1/2}.
inline Tensor log_map(const Tensor& g, const Tensor& z) {
  const SqrtPair r = sqrt_pair(g);
  return symmetrize(congruence(r.sqrt, tmknet::sym_fn(symmetrize(congruence(r.inv_sqrt, z)), SpectralFn::log())));
}

/// Riemannian exponential map at g of the symmetric tangent vector s.
inline Tensor exp_map(const Tensor& g, const Tensor& s) {
  const SqrtPair r = sqrt_pair(g);
  return symmetrize(congruence(r.sqrt, tmknet::sym_fn(symmetrize(congruence(r.inv_sqrt, s)), SpectralFn::exp())));
}

inline void require_batch(const std::vector<Tensor>& batch, const char* who) {
  if (batch.empty()) throw ShapeError(std::string(who) + ": empty batch");
  for (const Tensor& z : batch) require_same_size(z, batch.front(), who);
}

struct KarcherOptions {
  int iters = 20;
  double tol = 1e-8;  ///< stop early once the tangent-mean norm falls below this
};

struct KarcherResult {
  Tensor mean;
  /// ||(1/K) sum_j log(G^{-1/2} Z_j G^{-1/2})||_F at the start of each iteration and at the output.
  std::vector<double> gradient_norms;
};

/// Karcher flow: G <- G^{1/2} exp(mean_j log(G^{-1/2} Z_j G^{-1/2})) G^{1/2}.
inline KarcherResult karcher_flow(const std::vector<Tensor>& batch, const Tensor& init, KarcherOptions opt = {}) {
  require_batch(batch, "karcher_mean");
  require_same_size(init, batch.front(), "karcher_mean");
  require_spd(init, "karcher_mean");
  if (opt.iters < 1) throw ShapeError("karcher_mean: iters must be positive");
  const std::size_t n = init.dim(0);
  KarcherResult res{init, {}};
  auto tangent_mean = [&](const SqrtPair& r) {
    Tensor acc({n, n});
    for (const Tensor& z : batch) acc += tmknet::sym_fn(symmetrize(congruence(r.inv_sqrt, z)), SpectralFn::log());
    return acc * (1.0 / static_cast<double>(batch.size()));
  };
  for (int it = 0; it < opt.iters; ++it) {
    const SqrtPair r = sqrt_pair(res.mean);
    const Tensor t = tangent_mean(r);
    res.gradient_norms.push_back(frobenius_norm(t));
    if (it > 0 && res.gradient_norms.back() < opt.tol) return res;
    res.mean = symmetrize(congruence(r.sqrt, tmknet::sym_fn(t, SpectralFn::exp())));
  }
  res.gradient_norms.push_back(frobenius_norm(tangent_mean(sqrt_pair(res.mean))));
  return res;
}

inline Tensor karcher_mean(const std::vector<Tensor>& batch, int iters, const Tensor& init) {
  return karcher_flow(batch, init, {iters, 0.0}).mean;
}

/// Default initialization (identity) and iteration count for standalone means.
inline Tensor karcher_mean(const std::vector<Tensor>& batch) {
  require_batch(batch, "karcher_mean");
  return karcher_flow(batch, Tensor::identity(batch.front().dim(0))).mean;
}

/// One Karcher step from the identity: exp(mean_j log Z_j).
inline Tensor log_euclidean_mean(const std::vector<Tensor>& batch) {
  require_batch(batch, "log_euclidean_mean");
  const std::size_t n = batch.front().dim(0);
  Tensor acc({n, n});
  for (const Tensor& z : batch) acc += tmknet::sym_fn(z, SpectralFn::log());
  return tmknet::sym_fn(acc * (1.0 / static_cast<double>(batch.size())), SpectralFn::exp());
}

/// Mean squared AIRM distance to g.
inline double frechet_variance(const std::vector<Tensor>& batch, const Tensor& g) {
  require_batch(batch, "frechet_variance");
  double s = 0.0;
  for (const Tensor& z : batch) {
    const double d = airm_dist(g, z);
    s += d * d;
  }
  return s / static_cast<double>(batch.size());
}

/// Symmetric matrix attached to a base point.
struct TangentVector {
  Tensor vector;
  Tensor base;
};

/// Transport of s from z1 to z2: E s E^T with E = (z2 z1^{-1})^{1/2}, evaluated
/// as z1^{1/2} (z1^{-1/2} z2 z1^{-1/2})^{1/2} z1^{-1/2}.
inline Tensor transport_operator(const Tensor& z1, const Tensor& z2) {
  require_same_size(z1, z2, "parallel_transport");
  require_spd(z1, "parallel_transport");
  require_spd(z2, "parallel_transport");
  const SqrtPair r = sqrt_pair(z1);
  const Tensor mid = tmknet::sym_fn(symmetrize(congruence(r.inv_sqrt, z2)), SpectralFn::sqrt());
  return matmul(matmul(r.sqrt, mid), r.inv_sqrt);
}

inline TangentVector parallel_transport(const TangentVector& s, const Tensor& z2) {
  require_same_size(s.vector, s.base, "parallel_transport");
  const Tensor e = transport_operator(s.base, z2);
  return {symmetrize(matmul(matmul(e, s.vector), transpose(e))), z2};
}

/// AIRM inner product <a, b>_z = tr(z^{-1} a z^{-1} b).
inline double metric_inner(const Tensor& z, const Tensor& a, const Tensor& b) {
  const Tensor zi = tmknet::sym_fn(z, SpectralFn::pow(-1.0));
  return trace(matmul(matmul(matmul(zi, a), zi), b));
}

}  // namespace tmknet::spd

#endif  // TMKNET_SPD_HPP
