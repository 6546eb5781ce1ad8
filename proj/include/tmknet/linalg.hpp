#ifndef TMKNET_LINALG_HPP
#define TMKNET_LINALG_HPP

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "tmknet/error.hpp"
#include "tmknet/tensor.hpp"

namespace tmknet {

/// Eigendecomposition of a symmetric matrix: ascending eigenvalues, eigenvectors as columns.
struct SymEig {
  std::vector<double> values;
  Tensor vectors;
};

namespace detail {

// Cyclic Jacobi rotations; `a` is overwritten (row-major, n x n), `v` receives eigenvectors.
inline void jacobi_eig(std::vector<double>& a, std::size_t n, std::vector<double>& v, std::vector<double>& d) {
  v.assign(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) v[i * n + i] = 1.0;
  double norm = 0.0;
  for (double x : a) norm += x * x;
  norm = std::sqrt(norm);
  constexpr int kMaxSweeps = 100;
  bool converged = false;
  for (int sweep = 0; sweep < kMaxSweeps; ++sweep) {
    double off = 0.0;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) off += a[p * n + q] * a[p * n + q];
    if (std::sqrt(off) <= 1e-17 * norm || off == 0.0) {
      converged = true;
      break;
    }
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a[p * n + q];
        if (apq == 0.0) continue;
        const double app = a[p * n + p];
        const double aqq = a[q * n + q];
        const double g = 100.0 * std::abs(apq);
        if (sweep > 3 && std::abs(app) + g == std::abs(app) && std::abs(aqq) + g == std::abs(aqq)) {
          a[p * n + q] = 0.0;
          a[q * n + p] = 0.0;
          continue;
        }
        const double theta = (aqq - app) / (2.0 * apq);
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a[k * n + p];
          const double akq = a[k * n + q];
          a[k * n + p] = c * akp - s * akq;
          a[k * n + q] = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a[p * n + k];
          const double aqk = a[q * n + k];
          a[p * n + k] = c * apk - s * aqk;
          a[q * n + k] = s * apk + c * aqk;
        }
        a[p * n + q] = 0.0;
        a[q * n + p] = 0.0;
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = v[k * n + p];
          const double vkq = v[k * n + q];
          v[k * n + p] = c * vkp - s * vkq;
          v[k * n + q] = s * vkp + c * vkq;
        }
      }
    }
  }
  if (!converged) throw NumericalError("sym_eig: Jacobi iteration did not converge");
  d.resize(n);
  for (std::size_t i = 0; i < n; ++i) d[i] = a[i * n + i];
}

// Householder tridiagonalization followed by implicit QL (EISPACK tred2/tql2 lineage).
inline void tridiagonal_ql_eig(const std::vector<double>& a, std::size_t n, std::vector<double>& vout,
                               std::vector<double>& d) {
  std::vector<std::vector<double>> V(n, std::vector<double>(n));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) V[i][j] = a[i * n + j];
  d.assign(n, 0.0);
  std::vector<double> e(n, 0.0);

  for (std::size_t j = 0; j < n; ++j) d[j] = V[n - 1][j];
  for (std::size_t i = n - 1; i > 0; --i) {
    double scale = 0.0;
    double h = 0.0;
    for (std::size_t k = 0; k < i; ++k) scale += std::abs(d[k]);
    if (scale == 0.0) {
      e[i] = d[i - 1];
      for (std::size_t j = 0; j < i; ++j) {
        d[j] = V[i - 1][j];
        V[i][j] = 0.0;
        V[j][i] = 0.0;
      }
    } else {
      for (std::size_t k = 0; k < i; ++k) {
        d[k] /= scale;
        h += d[k] * d[k];
      }
      double f = d[i - 1];
      double g = std::sqrt(h);
      if (f > 0) g = -g;
      e[i] = scale * g;
      h -= f * g;
      d[i - 1] = f - g;
      for (std::size_t j = 0; j < i; ++j) e[j] = 0.0;
      for (std::size_t j = 0; j < i; ++j) {
        f = d[j];
        V[j][i] = f;
        g = e[j] + V[j][j] * f;
        for (std::size_t k = j + 1; k <= i - 1; ++k) {
          g += V[k][j] * d[k];
          e[k] += V[k][j] * f;
        }
        e[j] = g;
      }
      f = 0.0;
      for (std::size_t j = 0; j < i; ++j) {
        e[j] /= h;
        f += e[j] * d[j];
      }
      const double hh = f / (h + h);
      for (std::size_t j = 0; j < i; ++j) e[j] -= hh * d[j];
      for (std::size_t j = 0; j < i; ++j) {
        f = d[j];
        g = e[j];
        for (std::size_t k = j; k <= i - 1; ++k) V[k][j] -= (f * e[k] + g * d[k]);
        d[j] = V[i - 1][j];
        V[i][j] = 0.0;
      }
    }
    d[i] = h;
  }
  for (std::size_t i = 0; i + 1 < n; ++i) {
    V[n - 1][i] = V[i][i];
    V[i][i] = 1.0;
    const double h = d[i + 1];
    if (h != 0.0) {
      for (std::size_t k = 0; k <= i; ++k) d[k] = V[k][i + 1] / h;
      for (std::size_t j = 0; j <= i; ++j) {
        double g = 0.0;
        for (std::size_t k = 0; k <= i; ++k) g += V[k][i + 1] * V[k][j];
        for (std::size_t k = 0; k <= i; ++k) V[k][j] -= g * d[k];
      }
    }
    for (std::size_t k = 0; k <= i; ++k) V[k][i + 1] = 0.0;
  }
  for (std::size_t j = 0; j < n; ++j) {
    d[j] = V[n - 1][j];
    V[n - 1][j] = 0.0;
  }
  V[n - 1][n - 1] = 1.0;
  e[0] = 0.0;

  for (std::size_t i = 1; i < n; ++i) e[i - 1] = e[i];
  e[n - 1] = 0.0;
  double f = 0.0;
  double tst1 = 0.0;
  const double eps = std::numeric_limits<double>::epsilon();
  for (std::size_t l = 0; l < n; ++l) {
    tst1 = std::max(tst1, std::abs(d[l]) + std::abs(e[l]));
    std::size_t m = l;
    while (m < n) {
      if (std::abs(e[m]) <= eps * tst1) break;
      ++m;
    }
    if (m > l) {
      int iter = 0;
      do {
        if (++iter > 60) throw NumericalError("sym_eig: QL iteration did not converge");
        double g = d[l];
        double p = (d[l + 1] - g) / (2.0 * e[l]);
        double r = std::hypot(p, 1.0);
        if (p < 0) r = -r;
        d[l] = e[l] / (p + r);
        d[l + 1] = e[l] * (p + r);
        const double dl1 = d[l + 1];
        double h = g - d[l];
        for (std::size_t i = l + 2; i < n; ++i) d[i] -= h;
        f += h;
        p = d[m];
        double c = 1.0, c2 = 1.0, c3 = 1.0;
        const double el1 = e[l + 1];
        double s = 0.0, s2 = 0.0;
        for (std::size_t ii = m; ii-- > l;) {
          c3 = c2;
          c2 = c;
          s2 = s;
          g = c * e[ii];
          h = c * p;
          r = std::hypot(p, e[ii]);
          e[ii + 1] = s * r;
          s = e[ii] / r;
          c = p / r;
          p = c * d[ii] - s * g;
          d[ii + 1] = h + s * (c * g + s * d[ii]);
          for (std::size_t k = 0; k < n; ++k) {
            h = V[k][ii + 1];
            V[k][ii + 1] = s * V[k][ii] + c * h;
            V[k][ii] = c * V[k][ii] - s * h;
          }
        }
        p = -s * s2 * c3 * el1 * e[l] / dl1;
        e[l] = s * p;
        d[l] = c * p;
      } while (std::abs(e[l]) > eps * tst1);
    }
    d[l] += f;
    e[l] = 0.0;
  }
  vout.assign(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) vout[i * n + j] = V[i][j];
}

}  // namespace detail

/// Matrices up to this size use cyclic Jacobi; larger ones use tridiagonal QL.
inline constexpr std::size_t kJacobiMaxSize = 32;

/// Symmetric eigendecomposition. The input is symmetrized as (m + m^T)/2 after
/// checking that its relative asymmetry is below 1e-8.
inline SymEig sym_eig(const Tensor& m) {
  require_square(m, "sym_eig");
  if (!m.all_finite()) throw NumericalError("sym_eig: non-finite input");
  const std::size_t n = m.dim(0);
  double norm = 0.0, asym = 0.0;
  std::vector<double> a(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      const double x = m[i * n + j], y = m[j * n + i];
      norm += x * x;
      asym += (x - y) * (x - y);
      a[i * n + j] = 0.5 * (x + y);
    }
  if (std::sqrt(asym) > 1e-8 * std::sqrt(norm))
    throw ShapeError("sym_eig: input is not symmetric (relative asymmetry " +
                     std::to_string(std::sqrt(asym / std::max(norm, 1e-300))) + ")");
  SymEig out;
  if (n == 0) {
    out.vectors = Tensor({0, 0});
    return out;
  }
  std::vector<double> v, d;
  if (n <= kJacobiMaxSize)
    detail::jacobi_eig(a, n, v, d);
  else
    detail::tridiagonal_ql_eig(a, n, v, d);

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) { return d[i] < d[j]; });
  out.values.resize(n);
  out.vectors = Tensor({n, n});
  for (std::size_t c = 0; c < n; ++c) {
    out.values[c] = d[order[c]];
    for (std::size_t r = 0; r < n; ++r) out.vectors[r * n + c] = v[r * n + order[c]];
  }
  return out;
}

/// Scalar function applied to eigenvalues.
struct SpectralFn {
  enum class Kind { Log, Exp, Pow, Sqrt, InvSqrt, ClampMin };
  Kind kind = Kind::Log;
  double param = 0.0;

  static SpectralFn log() { return {Kind::Log, 0.0}; }
  static SpectralFn exp() { return {Kind::Exp, 0.0}; }
  static SpectralFn pow(double w) { return {Kind::Pow, w}; }
  static SpectralFn sqrt() { return {Kind::Sqrt, 0.0}; }
  static SpectralFn inv_sqrt() { return {Kind::InvSqrt, 0.0}; }
  static SpectralFn clamp_min(double eps) { return {Kind::ClampMin, eps}; }

  bool needs_positive() const { return kind != Kind::Exp && kind != Kind::ClampMin; }

  double operator()(double x) const {
    switch (kind) {
      case Kind::Log: return std::log(x);
      case Kind::Exp: return std::exp(x);
      case Kind::Pow: return std::pow(x, param);
      case Kind::Sqrt: return std::sqrt(x);
      case Kind::InvSqrt: return 1.0 / std::sqrt(x);
      case Kind::ClampMin: return std::max(x, param);
    }
    return 0.0;
  }

  double derivative(double x) const {
    switch (kind) {
      case Kind::Log: return 1.0 / x;
      case Kind::Exp: return std::exp(x);
      case Kind::Pow: return param * std::pow(x, param - 1.0);
      case Kind::Sqrt: return 0.5 / std::sqrt(x);
      case Kind::InvSqrt: return -0.5 / (x * std::sqrt(x));
      case Kind::ClampMin: return x > param ? 1.0 : 0.0;
    }
    return 0.0;
  }

  std::string name() const {
    switch (kind) {
      case Kind::Log: return "log";
      case Kind::Exp: return "exp";
      case Kind::Pow: return "pow(" + std::to_string(param) + ")";
      case Kind::Sqrt: return "sqrt";
      case Kind::InvSqrt: return "inv_sqrt";
      case Kind::ClampMin: return "clamp_min(" + std::to_string(param) + ")";
    }
    return "?";
  }
};

/// U * diag(values) * U^T, exactly symmetric.
inline Tensor reconstruct(const Tensor& u, std::span<const double> values) {
  const std::size_t n = values.size();
  Tensor out({n, n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i; j < n; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < n; ++k) s += u[i * n + k] * values[k] * u[j * n + k];
      out[i * n + j] = s;
      out[j * n + i] = s;
    }
  return out;
}

inline void check_spectral_domain(const SymEig& eig, const SpectralFn& f, const char* who) {
  if (!f.needs_positive()) return;
  for (double l : eig.values)
    if (!(l > 0.0))
      throw NumericalError(std::string(who) + ": " + f.name() + " requires positive eigenvalues, found " +
                           std::to_string(l));
}

inline Tensor sym_fn(const SymEig& eig, const SpectralFn& f) {
  check_spectral_domain(eig, f, "sym_fn");
  std::vector<double> fv(eig.values.size());
  for (std::size_t i = 0; i < fv.size(); ++i) fv[i] = f(eig.values[i]);
  Tensor out = reconstruct(eig.vectors, fv);
  if (!out.all_finite()) throw NumericalError("sym_fn: non-finite result for " + f.name());
  return out;
}

inline Tensor sym_fn(const Tensor& m, const SpectralFn& f) { return sym_fn(sym_eig(m), f); }

/// Loewner (divided-difference) matrix of a spectral function at the given eigenvalues.
/// Pairs closer than 1e-10 * max|lambda| use the derivative instead.
inline std::vector<double> loewner_matrix(std::span<const double> lambda, std::span<const double> fvals,
                                          std::span<const double> fderiv) {
  const std::size_t n = lambda.size();
  double scale = 0.0;
  for (double l : lambda) scale = std::max(scale, std::abs(l));
  const double tau = 1e-10 * scale;
  std::vector<double> k(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      const double gap = lambda[i] - lambda[j];
      k[i * n + j] = std::abs(gap) > tau ? (fvals[i] - fvals[j]) / gap : fderiv[i];
    }
  return k;
}

/// U * (K o (U^T sym(upstream) U)) * U^T for a precomputed Loewner matrix K.
inline Tensor loewner_vjp(const SymEig& eig, std::span<const double> k, const Tensor& upstream) {
  const std::size_t n = eig.values.size();
  const Tensor& u = eig.vectors;
  Tensor m = matmul(matmul(transpose(u), symmetrize(upstream)), u);
  for (std::size_t i = 0; i < n * n; ++i) m[i] *= k[i];
  return symmetrize(matmul(matmul(u, m), transpose(u)));
}

inline Tensor sym_fn_vjp(const SymEig& eig, const SpectralFn& f, const Tensor& upstream) {
  check_spectral_domain(eig, f, "sym_fn_vjp");
  const std::size_t n = eig.values.size();
  if (upstream.shape() != Shape{n, n}) throw ShapeError("sym_fn_vjp: upstream shape mismatch");
  std::vector<double> fv(n), fd(n);
  for (std::size_t i = 0; i < n; ++i) {
    fv[i] = f(eig.values[i]);
    fd[i] = f.derivative(eig.values[i]);
  }
  return loewner_vjp(eig, loewner_matrix(eig.values, fv, fd), upstream);
}

/// Vector-Jacobian product of X -> sym_fn(X, f) for symmetric X.
inline Tensor sym_fn_vjp(const Tensor& m, const SpectralFn& f, const Tensor& upstream) {
  return sym_fn_vjp(sym_eig(m), f, upstream);
}

/// Applies `op` to every slice along the leading axis and restacks. An empty batch maps to itself.
template <class Op>
Tensor batched_apply(const Tensor& batch, Op&& op) {
  if (batch.rank() == 0) throw ShapeError("batched_apply: batch needs a leading axis");
  const std::size_t k = batch.dim(0);
  if (k == 0) return batch;
  std::vector<Tensor> out;
  out.reserve(k);
  for (std::size_t i = 0; i < k; ++i) out.push_back(op(batch.slice(i)));
  return stack(out);
}

}  // namespace tmknet

#endif  // TMKNET_LINALG_HPP
