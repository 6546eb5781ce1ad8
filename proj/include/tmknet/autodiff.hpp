#ifndef TMKNET_AUTODIFF_HPP
#define TMKNET_AUTODIFF_HPP

#include <algorithm>
#include <cmath>
#include <deque>
#include <functional>
#include <limits>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "tmknet/error.hpp"
#include "tmknet/linalg.hpp"
#include "tmknet/tensor.hpp"

namespace tmknet::ad {

class Tape;

/// Handle to a node recorded on a Tape.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;
  bool valid() const { return tape_ != nullptr; }
  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }

 private:
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
  friend class Tape;
};

/// Accumulates vector-Jacobian products into the parents' gradient slots.
/// A slot is null when that parent does not require a gradient.
using BackwardFn = std::function<void(const Tensor& grad_out, std::span<Tensor* const> parent_grads)>;

/// Linear recording of operations. Parents always precede children, so reverse
/// insertion order is a valid topological order for backward.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad = true) {
    if (!value.all_finite()) throw NumericalError("Tape::leaf: non-finite value");
    nodes_.push_back(Node{"leaf", std::move(value), {}, nullptr, requires_grad});
    return Var(this, nodes_.size() - 1);
  }

  Var constant(Tensor value) { return leaf(std::move(value), false); }

  Var record(std::string op, const std::vector<Var>& inputs, Tensor value, BackwardFn fn) {
    if (backward_done_) throw StateError("Tape::record after backward; use a fresh tape");
    std::vector<std::size_t> parents;
    parents.reserve(inputs.size());
    bool needs = false;
    for (const Var& v : inputs) {
      if (v.tape_ != this) throw StateError("Tape::record(" + op + "): input belongs to a different tape");
      parents.push_back(v.id_);
      needs = needs || nodes_[v.id_].requires_grad;
    }
    if (!value.all_finite()) throw NumericalError("Tape::record(" + op + "): non-finite result");
    nodes_.push_back(Node{std::move(op), std::move(value), std::move(parents), needs ? std::move(fn) : nullptr, needs});
    return Var(this, nodes_.size() - 1);
  }

  /// Reverse sweep from a scalar loss. Allowed once per tape.
  void backward(const Var& loss) {
    if (loss.tape_ != this) throw StateError("Tape::backward: loss belongs to a different tape");
    if (backward_done_) throw StateError("Tape::backward called twice on the same recording");
    const Node& root = nodes_[loss.id_];
    if (root.value.size() != 1) throw ShapeError("Tape::backward: loss must be scalar, got " + shape_str(root.value.shape()));
    backward_done_ = true;
    grads_.assign(nodes_.size(), Tensor());
    grads_[loss.id_] = Tensor(root.value.shape(), 1.0);
    std::vector<Tensor*> slots;
    for (std::size_t i = loss.id_ + 1; i-- > 0;) {
      Node& node = nodes_[i];
      if (!node.backward || grads_[i].empty()) continue;
      slots.assign(node.parents.size(), nullptr);
      for (std::size_t p = 0; p < node.parents.size(); ++p) {
        const std::size_t pid = node.parents[p];
        if (!nodes_[pid].requires_grad) continue;
        if (grads_[pid].empty() && !nodes_[pid].value.empty()) grads_[pid] = Tensor(nodes_[pid].value.shape());
        if (grads_[pid].shape() != nodes_[pid].value.shape()) grads_[pid] = Tensor(nodes_[pid].value.shape());
        slots[p] = &grads_[pid];
      }
      node.backward(grads_[i], slots);
    }
  }

  /// Gradient of the last backward() loss with respect to `v`; zeros if `v` is not on a path to it.
  Tensor grad(const Var& v) const {
    if (v.tape_ != this) throw StateError("Tape::grad: variable belongs to a different tape");
    if (!backward_done_) throw StateError("Tape::grad before backward");
    if (v.id_ < grads_.size() && !grads_[v.id_].empty()) return grads_[v.id_];
    return Tensor(nodes_[v.id_].value.shape());
  }

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  const std::string& op_name(std::size_t id) const { return nodes_[id].op; }
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    std::string op;
    Tensor value;
    std::vector<std::size_t> parents;
    BackwardFn backward;
    bool requires_grad = false;
  };
  std::deque<Node> nodes_;
  std::vector<Tensor> grads_;
  bool backward_done_ = false;
};

inline const Tensor& Var::value() const {
  if (!tape_) throw StateError("Var::value on an empty handle");
  return tape_->value(id_);
}

inline bool Var::requires_grad() const { return tape_ && tape_->requires_grad(id_); }

namespace detail {

inline Tape& tape_of(const Var& v) {
  if (!v.valid()) throw StateError("autodiff: empty variable");
  return *v.tape();
}

inline void same_shape(const Var& a, const Var& b, const char* who) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(who) + ": shape " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

// Elementwise unary op with derivative expressed through input x and output y.
template <class F, class D>
Var unary(const char* name, const Var& x, F f, D dfdx) {
  Tensor y(x.shape());
  const Tensor& xv = x.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = f(xv[i]);
  return tape_of(x).record(name, {x}, std::move(y), [x, dfdx](const Tensor& g, std::span<Tensor* const> s) {
    const Tensor& xv = x.value();
    Tensor& gx = *s[0];
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * dfdx(xv[i]);
  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and reductions

inline Var add(const Var& a, const Var& b) {
  detail::same_shape(a, b, "add");
  return detail::tape_of(a).record("add", {a, b}, a.value() + b.value(), [](const Tensor& g, std::span<Tensor* const> s) {
    if (s[0]) *s[0] += g;
    if (s[1]) *s[1] += g;
  });
}

inline Var sub(const Var& a, const Var& b) {
  detail::same_shape(a, b, "sub");
  return detail::tape_of(a).record("sub", {a, b}, a.value() - b.value(), [](const Tensor& g, std::span<Tensor* const> s) {
    if (s[0]) *s[0] += g;
    if (s[1]) *s[1] -= g;
  });
}

inline Var mul(const Var& a, const Var& b) {
  detail::same_shape(a, b, "mul");
  Tensor y(a.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.value()[i] * b.value()[i];
  return detail::tape_of(a).record("mul", {a, b}, std::move(y), [a, b](const Tensor& g, std::span<Tensor* const> s) {
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (s[0]) (*s[0])[i] += g[i] * b.value()[i];
      if (s[1]) (*s[1])[i] += g[i] * a.value()[i];
    }
  });
}

inline Var div(const Var& a, const Var& b) {
  detail::same_shape(a, b, "div");
  Tensor y(a.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.value()[i] / b.value()[i];
  return detail::tape_of(a).record("div", {a, b}, std::move(y), [a, b](const Tensor& g, std::span<Tensor* const> s) {
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double bv = b.value()[i];
      if (s[0]) (*s[0])[i] += g[i] / bv;
      if (s[1]) (*s[1])[i] -= g[i] * a.value()[i] / (bv * bv);
    }
  });
}

/// s * x for a scalar variable s.
inline Var mul_scalar(const Var& x, const Var& s) {
  if (s.value().size() != 1) throw ShapeError("mul_scalar: expected a scalar factor");
  const double sv = s.value()[0];
  return detail::tape_of(x).record("mul_scalar", {x, s}, x.value() * sv, [x, s](const Tensor& g, std::span<Tensor* const> sl) {
    if (sl[0]) *sl[0] += g * s.value()[0];
    if (sl[1]) (*sl[1])[0] += dot(g, x.value());
  });
}

inline Var scale(const Var& x, double c) {
  return detail::tape_of(x).record("scale", {x}, x.value() * c, [c](const Tensor& g, std::span<Tensor* const> s) {
    *s[0] += g * c;
  });
}

inline Var add_const(const Var& x, double c) {
  Tensor y = x.value();
  for (double& v : y.data()) v += c;
  return detail::tape_of(x).record("add_const", {x}, std::move(y), [](const Tensor& g, std::span<Tensor* const> s) {
    *s[0] += g;
  });
}

inline Var exp(const Var& x) {
  return detail::unary("exp", x, [](double v) { return std::exp(v); }, [](double v) { return std::exp(v); });
}

inline Var log(const Var& x) {
  return detail::unary("log", x, [](double v) { return std::log(v); }, [](double v) { return 1.0 / v; });
}

/// Square root; the derivative at 0 is taken as 0.
inline Var sqrt(const Var& x) {
  return detail::unary("sqrt", x, [](double v) { return std::sqrt(v); },
                       [](double v) { return v > 0.0 ? 0.5 / std::sqrt(v) : 0.0; });
}

inline Var square(const Var& x) {
  return detail::unary("square", x, [](double v) { return v * v; }, [](double v) { return 2.0 * v; });
}

inline Var leaky_relu(const Var& x, double slope) {
  return detail::unary("leaky_relu", x, [slope](double v) { return v > 0.0 ? v : slope * v; },
                       [slope](double v) { return v > 0.0 ? 1.0 : slope; });
}

inline Var sum(const Var& x) {
  double acc = 0.0;
  for (double v : x.value().data()) acc += v;
  return detail::tape_of(x).record("sum", {x}, Tensor::scalar(acc), [](const Tensor& g, std::span<Tensor* const> s) {
    for (double& v : s[0]->data()) v += g[0];
  });
}

inline Var mean(const Var& x) {
  if (x.value().size() == 0) throw ShapeError("mean of empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.value().size()));
}

/// Mean over the leading axis: (K, ...) -> (...).
inline Var mean_axis0(const Var& x) {
  const Tensor& xv = x.value();
  if (xv.rank() == 0 || xv.dim(0) == 0) throw ShapeError("mean_axis0: empty leading axis");
  const std::size_t k = xv.dim(0);
  const std::size_t n = xv.size() / k;
  Shape shape(xv.shape().begin() + 1, xv.shape().end());
  Tensor y(shape);
  for (std::size_t b = 0; b < k; ++b)
    for (std::size_t i = 0; i < n; ++i) y[i] += xv[b * n + i];
  y *= 1.0 / static_cast<double>(k);
  return detail::tape_of(x).record("mean_axis0", {x}, std::move(y), [k, n](const Tensor& g, std::span<Tensor* const> s) {
    const double w = 1.0 / static_cast<double>(k);
    for (std::size_t b = 0; b < k; ++b)
      for (std::size_t i = 0; i < n; ++i) (*s[0])[b * n + i] += w * g[i];
  });
}

/// Scalar element `index` (row-major flat index) of x.
inline Var pick(const Var& x, std::size_t index) {
  if (index >= x.value().size()) throw ShapeError("pick: index out of range");
  return detail::tape_of(x).record("pick", {x}, Tensor::scalar(x.value()[index]),
                                   [index](const Tensor& g, std::span<Tensor* const> s) { (*s[0])[index] += g[0]; });
}

// ---------------------------------------------------------------------------
// Shape manipulation

inline Var reshape(const Var& x, Shape shape) {
  Tensor y = x.value().reshaped(std::move(shape));
  return detail::tape_of(x).record("reshape", {x}, std::move(y), [](const Tensor& g, std::span<Tensor* const> s) {
    for (std::size_t i = 0; i < g.size(); ++i) (*s[0])[i] += g[i];
  });
}

namespace detail {
// outer = product of axes before `axis`, inner = product of axes after it.
inline void axis_split(const Shape& shape, std::size_t axis, std::size_t& outer, std::size_t& inner) {
  outer = 1;
  inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
}
}  // namespace detail

/// Concatenation along `axis`; all other axes must agree.
inline Var concat(const std::vector<Var>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& first = parts[0].shape();
  if (axis >= first.size()) throw ShapeError("concat: axis out of range");
  Shape out_shape = first;
  out_shape[axis] = 0;
  std::vector<std::size_t> lens;
  for (const Var& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != first.size()) throw ShapeError("concat: rank mismatch");
    for (std::size_t i = 0; i < s.size(); ++i)
      if (i != axis && s[i] != first[i]) throw ShapeError("concat: shape mismatch " + shape_str(s) + " vs " + shape_str(first));
    lens.push_back(s[axis]);
    out_shape[axis] += s[axis];
  }
  std::size_t outer = 0, inner = 0;
  detail::axis_split(first, axis, outer, inner);
  const std::size_t total = out_shape[axis];
  Tensor y(out_shape);
  std::size_t start = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const Tensor& v = parts[p].value();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(v.data().begin() + static_cast<std::ptrdiff_t>(o * lens[p] * inner), lens[p] * inner,
                  y.data().begin() + static_cast<std::ptrdiff_t>((o * total + start) * inner));
    start += lens[p];
  }
  return detail::tape_of(parts[0]).record(
      "concat", parts, std::move(y), [lens, outer, inner, total](const Tensor& g, std::span<Tensor* const> s) {
        std::size_t start = 0;
        for (std::size_t p = 0; p < lens.size(); ++p) {
          if (s[p]) {
            Tensor& gp = *s[p];
            for (std::size_t o = 0; o < outer; ++o)
              for (std::size_t i = 0; i < lens[p] * inner; ++i)
                gp[o * lens[p] * inner + i] += g[(o * total + start) * inner + i];
          }
          start += lens[p];
        }
      });
}

/// Gathers entries `indices` along `axis` (repeats allowed).
inline Var index_select(const Var& x, std::size_t axis, std::vector<std::size_t> indices) {
  const Shape& xs = x.shape();
  if (axis >= xs.size()) throw ShapeError("index_select: axis out of range");
  for (std::size_t i : indices)
    if (i >= xs[axis]) throw ShapeError("index_select: index " + std::to_string(i) + " out of range");
  std::size_t outer = 0, inner = 0;
  detail::axis_split(xs, axis, outer, inner);
  Shape ys = xs;
  ys[axis] = indices.size();
  Tensor y(ys);
  const std::size_t n_in = xs[axis], n_out = indices.size();
  const Tensor& xv = x.value();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t j = 0; j < n_out; ++j)
      std::copy_n(xv.data().begin() + static_cast<std::ptrdiff_t>((o * n_in + indices[j]) * inner), inner,
                  y.data().begin() + static_cast<std::ptrdiff_t>((o * n_out + j) * inner));
  return detail::tape_of(x).record("index_select", {x}, std::move(y),
                                   [indices = std::move(indices), outer, inner, n_in](const Tensor& g, std::span<Tensor* const> s) {
                                     const std::size_t n_out = indices.size();
                                     for (std::size_t o = 0; o < outer; ++o)
                                       for (std::size_t j = 0; j < n_out; ++j)
                                         for (std::size_t i = 0; i < inner; ++i)
                                           (*s[0])[(o * n_in + indices[j]) * inner + i] += g[(o * n_out + j) * inner + i];
                                   });
}

// ---------------------------------------------------------------------------
// Linear algebra

inline Var matmul(const Var& a, const Var& b) {
  return detail::tape_of(a).record("matmul", {a, b}, tmknet::matmul(a.value(), b.value()),
                                   [a, b](const Tensor& g, std::span<Tensor* const> s) {
                                     if (s[0]) *s[0] += tmknet::matmul(g, tmknet::transpose(b.value()));
                                     if (s[1]) *s[1] += tmknet::matmul(tmknet::transpose(a.value()), g);
                                   });
}

inline Var transpose(const Var& a) {
  return detail::tape_of(a).record("transpose", {a}, tmknet::transpose(a.value()),
                                   [](const Tensor& g, std::span<Tensor* const> s) { *s[0] += tmknet::transpose(g); });
}

/// Batched matmul: (K,n,m) x (K,m,p) -> (K,n,p).
inline Var bmm(const Var& a, const Var& b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 3 || bv.rank() != 3 || av.dim(0) != bv.dim(0) || av.dim(2) != bv.dim(1))
    throw ShapeError("bmm: " + shape_str(av.shape()) + " x " + shape_str(bv.shape()));
  const std::size_t k = av.dim(0);
  std::vector<Tensor> out;
  for (std::size_t i = 0; i < k; ++i) out.push_back(tmknet::matmul(av.slice(i), bv.slice(i)));
  Tensor y = k ? stack(out) : Tensor({0, av.dim(1), bv.dim(2)});
  return detail::tape_of(a).record("bmm", {a, b}, std::move(y), [a, b, k](const Tensor& g, std::span<Tensor* const> s) {
    for (std::size_t i = 0; i < k; ++i) {
      const Tensor gi = g.slice(i);
      if (s[0]) {
        Tensor cur = s[0]->slice(i);
        cur += tmknet::matmul(gi, tmknet::transpose(b.value().slice(i)));
        s[0]->set_slice(i, cur);
      }
      if (s[1]) {
        Tensor cur = s[1]->slice(i);
        cur += tmknet::matmul(tmknet::transpose(a.value().slice(i)), gi);
        s[1]->set_slice(i, cur);
      }
    }
  });
}

/// Bilinear map A * X_k * A^T for a (p,n) matrix A and an (K,n,n) batch X.
inline Var congruence(const Var& a, const Var& x) {
  const Tensor& av = a.value();
  const Tensor& xv = x.value();
  if (av.rank() != 2 || xv.rank() != 3 || xv.dim(1) != av.dim(1) || xv.dim(2) != av.dim(1))
    throw ShapeError("congruence: A " + shape_str(av.shape()) + ", X " + shape_str(xv.shape()));
  const std::size_t k = xv.dim(0), p = av.dim(0);
  Tensor y({k, p, p});
  for (std::size_t i = 0; i < k; ++i) y.set_slice(i, symmetrize(tmknet::congruence(av, xv.slice(i))));
  return detail::tape_of(a).record("congruence", {a, x}, std::move(y), [a, x, k](const Tensor& g, std::span<Tensor* const> s) {
    const Tensor& av = a.value();
    const Tensor at = tmknet::transpose(av);
    for (std::size_t i = 0; i < k; ++i) {
      const Tensor gi = g.slice(i);
      if (s[1]) {
        Tensor cur = s[1]->slice(i);
        cur += tmknet::matmul(tmknet::matmul(at, gi), av);
        s[1]->set_slice(i, cur);
      }
      if (s[0]) {
        const Tensor xi = x.value().slice(i);
        *s[0] += tmknet::matmul(tmknet::matmul(gi, av), tmknet::transpose(xi));
        *s[0] += tmknet::matmul(tmknet::matmul(tmknet::transpose(gi), av), xi);
      }
    }
  });
}

namespace detail {
inline std::size_t batch_of_square(const Tensor& x, const char* who) {
  if (x.rank() != 3 || x.dim(1) != x.dim(2))
    throw ShapeError(std::string(who) + ": expected a (K,n,n) batch, got " + shape_str(x.shape()));
  return x.dim(0);
}
}  // namespace detail

/// Spectral function applied to every matrix of a (K,n,n) batch.
inline Var sym_fn(const Var& x, SpectralFn f) {
  const Tensor& xv = x.value();
  const std::size_t k = detail::batch_of_square(xv, "sym_fn");
  auto eigs = std::make_shared<std::vector<SymEig>>();
  eigs->reserve(k);
  Tensor y(xv.shape());
  for (std::size_t i = 0; i < k; ++i) {
    eigs->push_back(sym_eig(xv.slice(i)));
    y.set_slice(i, tmknet::sym_fn(eigs->back(), f));
  }
  return detail::tape_of(x).record("sym_fn:" + f.name(), {x}, std::move(y), [eigs, f](const Tensor& g, std::span<Tensor* const> s) {
    for (std::size_t i = 0; i < eigs->size(); ++i) {
      Tensor cur = s[0]->slice(i);
      cur += sym_fn_vjp((*eigs)[i], f, g.slice(i));
      s[0]->set_slice(i, cur);
    }
  });
}

/// X_k^p for a (K,n,n) SPD batch and a scalar exponent variable p.
inline Var sym_pow(const Var& x, const Var& p) {
  const Tensor& xv = x.value();
  const std::size_t k = detail::batch_of_square(xv, "sym_pow");
  if (p.value().size() != 1) throw ShapeError("sym_pow: exponent must be scalar");
  const double pv = p.value()[0];
  auto eigs = std::make_shared<std::vector<SymEig>>();
  Tensor y(xv.shape());
  for (std::size_t i = 0; i < k; ++i) {
    eigs->push_back(sym_eig(xv.slice(i)));
    y.set_slice(i, tmknet::sym_fn(eigs->back(), SpectralFn::pow(pv)));
  }
  return detail::tape_of(x).record("sym_pow", {x, p}, std::move(y), [eigs, pv](const Tensor& g, std::span<Tensor* const> s) {
    const SpectralFn f = SpectralFn::pow(pv);
    for (std::size_t i = 0; i < eigs->size(); ++i) {
      const SymEig& e = (*eigs)[i];
      const Tensor gi = g.slice(i);
      if (s[0]) {
        Tensor cur = s[0]->slice(i);
        cur += sym_fn_vjp(e, f, gi);
        s[0]->set_slice(i, cur);
      }
      if (s[1]) {
        const std::size_t n = e.values.size();
        const Tensor m = tmknet::matmul(tmknet::matmul(tmknet::transpose(e.vectors), symmetrize(gi)), e.vectors);
        double acc = 0.0;
        for (std::size_t j = 0; j < n; ++j) acc += m[j * n + j] * std::pow(e.values[j], pv) * std::log(e.values[j]);
        (*s[1])[0] += acc;
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Network layers

struct Conv2dParams {
  std::size_t stride_h = 1, stride_w = 1;
  std::size_t dilation_h = 1, dilation_w = 1;
};

/// Valid cross-correlation. x (B,Cin,H,W), w (Cout,Cin,KH,KW), bias (Cout) or an empty handle.
inline Var conv2d(const Var& x, const Var& w, const Var& bias, Conv2dParams cp = {}) {
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  if (xv.rank() != 4 || wv.rank() != 4 || xv.dim(1) != wv.dim(1))
    throw ShapeError("conv2d: x " + shape_str(xv.shape()) + ", w " + shape_str(wv.shape()));
  const std::size_t B = xv.dim(0), Cin = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  const std::size_t Cout = wv.dim(0), KH = wv.dim(2), KW = wv.dim(3);
  const std::size_t eff_h = cp.dilation_h * (KH - 1) + 1, eff_w = cp.dilation_w * (KW - 1) + 1;
  if (eff_h > H || eff_w > W)
    throw ShapeError("conv2d: kernel " + std::to_string(KH) + "x" + std::to_string(KW) + " larger than input " +
                     std::to_string(H) + "x" + std::to_string(W));
  const bool has_bias = bias.valid();
  if (has_bias && bias.value().shape() != Shape{Cout}) throw ShapeError("conv2d: bias shape");
  const std::size_t OH = (H - eff_h) / cp.stride_h + 1, OW = (W - eff_w) / cp.stride_w + 1;
  Tensor y({B, Cout, OH, OW});
  const double* px = xv.data().data();
  const double* pw = wv.data().data();
  double* py = y.data().data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t co = 0; co < Cout; ++co) {
      double* yo = py + (b * Cout + co) * OH * OW;
      if (has_bias) std::fill(yo, yo + OH * OW, bias.value()[co]);
      for (std::size_t ci = 0; ci < Cin; ++ci)
        for (std::size_t kh = 0; kh < KH; ++kh)
          for (std::size_t kw = 0; kw < KW; ++kw) {
            const double wt = pw[((co * Cin + ci) * KH + kh) * KW + kw];
            for (std::size_t oh = 0; oh < OH; ++oh) {
              const double* xr = px + ((b * Cin + ci) * H + oh * cp.stride_h + kh * cp.dilation_h) * W + kw * cp.dilation_w;
              double* yr = yo + oh * OW;
              for (std::size_t ow = 0; ow < OW; ++ow) yr[ow] += wt * xr[ow * cp.stride_w];
            }
          }
    }
  std::vector<Var> inputs{x, w};
  if (has_bias) inputs.push_back(bias);
  return detail::tape_of(x).record(
      "conv2d", inputs, std::move(y), [x, w, cp, has_bias](const Tensor& g, std::span<Tensor* const> s) {
        const Tensor& xv = x.value();
        const Tensor& wv = w.value();
        const std::size_t B = xv.dim(0), Cin = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
        const std::size_t Cout = wv.dim(0), KH = wv.dim(2), KW = wv.dim(3);
        const std::size_t OH = g.dim(2), OW = g.dim(3);
        const double* px = xv.data().data();
        const double* pw = wv.data().data();
        const double* pg = g.data().data();
        double* gx = s[0] ? s[0]->data().data() : nullptr;
        double* gw = s[1] ? s[1]->data().data() : nullptr;
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t co = 0; co < Cout; ++co) {
            const double* go = pg + (b * Cout + co) * OH * OW;
            if (has_bias && s[2]) {
              double acc = 0.0;
              for (std::size_t i = 0; i < OH * OW; ++i) acc += go[i];
              (*s[2])[co] += acc;
            }
            for (std::size_t ci = 0; ci < Cin; ++ci)
              for (std::size_t kh = 0; kh < KH; ++kh)
                for (std::size_t kw = 0; kw < KW; ++kw) {
                  const std::size_t widx = ((co * Cin + ci) * KH + kh) * KW + kw;
                  const double wt = pw[widx];
                  double wacc = 0.0;
                  for (std::size_t oh = 0; oh < OH; ++oh) {
                    const std::size_t xoff = ((b * Cin + ci) * H + oh * cp.stride_h + kh * cp.dilation_h) * W + kw * cp.dilation_w;
                    const double* gr = go + oh * OW;
                    for (std::size_t ow = 0; ow < OW; ++ow) {
                      const std::size_t xi = xoff + ow * cp.stride_w;
                      wacc += gr[ow] * px[xi];
                      if (gx) gx[xi] += gr[ow] * wt;
                    }
                  }
                  if (gw) gw[widx] += wacc;
                }
          }
      });
}

/// Non-overlapping max pooling over the last axis (kernel = stride = pool); a
/// trailing remainder shorter than `pool` is dropped. Ties route to the earliest index.
inline Var max_pool_last(const Var& x, std::size_t pool) {
  const Tensor& xv = x.value();
  if (xv.rank() == 0 || pool == 0) throw ShapeError("max_pool_last: bad input");
  const std::size_t len = xv.shape().back();
  const std::size_t out_len = len / pool;
  if (out_len == 0) throw ShapeError("max_pool_last: pool larger than axis");
  const std::size_t rows = xv.size() / len;
  Shape ys = xv.shape();
  ys.back() = out_len;
  Tensor y(ys);
  auto argmax = std::make_shared<std::vector<std::size_t>>(rows * out_len);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t o = 0; o < out_len; ++o) {
      std::size_t best = r * len + o * pool;
      for (std::size_t j = 1; j < pool; ++j) {
        const std::size_t idx = r * len + o * pool + j;
        if (xv[idx] > xv[best]) best = idx;
      }
      (*argmax)[r * out_len + o] = best;
      y[r * out_len + o] = xv[best];
    }
  return detail::tape_of(x).record("max_pool_last", {x}, std::move(y), [argmax](const Tensor& g, std::span<Tensor* const> s) {
    for (std::size_t i = 0; i < argmax->size(); ++i) (*s[0])[(*argmax)[i]] += g[i];
  });
}

/// Subtracts the mean over the last axis.
inline Var center_last(const Var& x) {
  const Tensor& xv = x.value();
  if (xv.rank() == 0) throw ShapeError("center_last: scalar input");
  const std::size_t len = xv.shape().back();
  const std::size_t rows = len ? xv.size() / len : 0;
  Tensor y = xv;
  for (std::size_t r = 0; r < rows; ++r) {
    double m = 0.0;
    for (std::size_t j = 0; j < len; ++j) m += xv[r * len + j];
    m /= static_cast<double>(len);
    for (std::size_t j = 0; j < len; ++j) y[r * len + j] -= m;
  }
  return detail::tape_of(x).record("center_last", {x}, std::move(y), [len, rows](const Tensor& g, std::span<Tensor* const> s) {
    for (std::size_t r = 0; r < rows; ++r) {
      double m = 0.0;
      for (std::size_t j = 0; j < len; ++j) m += g[r * len + j];
      m /= static_cast<double>(len);
      for (std::size_t j = 0; j < len; ++j) (*s[0])[r * len + j] += g[r * len + j] - m;
    }
  });
}

/// Shrinkage added to a covariance: lambda = floor + trace_scale * trace(C)/n.
struct CovRegularizer {
  double floor = 1e-6;
  double trace_scale = 1e-4;

  static CovRegularizer fixed(double lambda) { return {lambda, 0.0}; }
};

/// Row covariance of every (n,m) slice of x (K,n,m): centered, divisor m-1, plus lambda*I.
inline Var covariance(const Var& x, CovRegularizer reg) {
  const Tensor& xv = x.value();
  if (xv.rank() != 3) throw ShapeError("covariance: expected (K,n,m), got " + shape_str(xv.shape()));
  const std::size_t k = xv.dim(0), n = xv.dim(1), m = xv.dim(2);
  if (m < 2) throw ShapeError("covariance: need at least 2 observations, got " + std::to_string(m));
  auto centered = std::make_shared<Tensor>(xv);
  for (std::size_t r = 0; r < k * n; ++r) {
    double mu = 0.0;
    for (std::size_t j = 0; j < m; ++j) mu += xv[r * m + j];
    mu /= static_cast<double>(m);
    for (std::size_t j = 0; j < m; ++j) (*centered)[r * m + j] -= mu;
  }
  const double inv = 1.0 / static_cast<double>(m - 1);
  Tensor y({k, n, n});
  for (std::size_t b = 0; b < k; ++b) {
    const double* f = centered->data().data() + b * n * m;
    double* c = y.data().data() + b * n * n;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i; j < n; ++j) {
        double acc = 0.0;
        for (std::size_t t = 0; t < m; ++t) acc += f[i * m + t] * f[j * m + t];
        c[i * n + j] = c[j * n + i] = acc * inv;
      }
    double tr = 0.0;
    for (std::size_t i = 0; i < n; ++i) tr += c[i * n + i];
    const double lambda = reg.floor + reg.trace_scale * tr / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) c[i * n + i] += lambda;
  }
  return detail::tape_of(x).record("covariance", {x}, std::move(y), [centered, reg, k, n, m, inv](const Tensor& g, std::span<Tensor* const> s) {
    for (std::size_t b = 0; b < k; ++b) {
      const double* gc = g.data().data() + b * n * n;
      double tr = 0.0;
      for (std::size_t i = 0; i < n; ++i) tr += gc[i * n + i];
      // d/dC~ of (C~ + lambda(C~) I), symmetrized.
      std::vector<double> gs(n * n);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) gs[i * n + j] = gc[i * n + j] + gc[j * n + i];
      for (std::size_t i = 0; i < n; ++i) gs[i * n + i] += 2.0 * reg.trace_scale * tr / static_cast<double>(n);
      const double* f = centered->data().data() + b * n * m;
      std::vector<double> gf(n * m, 0.0);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          const double w = gs[i * n + j] * inv;
          if (w == 0.0) continue;
          for (std::size_t t = 0; t < m; ++t) gf[i * m + t] += w * f[j * m + t];
        }
      double* gx = s[0]->data().data() + b * n * m;
      for (std::size_t i = 0; i < n; ++i) {
        double mu = 0.0;
        for (std::size_t t = 0; t < m; ++t) mu += gf[i * m + t];
        mu /= static_cast<double>(m);
        for (std::size_t t = 0; t < m; ++t) gx[i * m + t] += gf[i * m + t] - mu;
      }
    }
  });
}

/// Per-channel statistics produced by a training-mode batch norm.
struct ChannelStats {
  std::vector<double> mean;
  std::vector<double> var_biased;
  std::vector<double> var_unbiased;
};

/// Batch normalization over axis 1 using batch statistics. x (B,C,...), gamma/beta (C).
inline Var batch_norm_train(const Var& x, const Var& gamma, const Var& beta, double eps, ChannelStats* stats = nullptr) {
  const Tensor& xv = x.value();
  if (xv.rank() < 2) throw ShapeError("batch_norm: expected (B,C,...)");
  const std::size_t B = xv.dim(0), C = xv.dim(1);
  const std::size_t inner = xv.size() / std::max<std::size_t>(B * C, 1);
  const std::size_t count = B * inner;
  if (gamma.value().shape() != Shape{C} || beta.value().shape() != Shape{C}) throw ShapeError("batch_norm: affine shape");
  if (count < 2) throw ShapeError("batch_norm: training mode needs at least 2 values per channel");
  auto xhat = std::make_shared<Tensor>(xv.shape());
  auto inv_std = std::make_shared<std::vector<double>>(C);
  ChannelStats st{std::vector<double>(C), std::vector<double>(C), std::vector<double>(C)};
  Tensor y(xv.shape());
  for (std::size_t c = 0; c < C; ++c) {
    double mu = 0.0;
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t i = 0; i < inner; ++i) mu += xv[(b * C + c) * inner + i];
    mu /= static_cast<double>(count);
    double var = 0.0;
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t i = 0; i < inner; ++i) {
        const double d = xv[(b * C + c) * inner + i] - mu;
        var += d * d;
      }
    st.mean[c] = mu;
    st.var_biased[c] = var / static_cast<double>(count);
    st.var_unbiased[c] = var / static_cast<double>(count - 1);
    const double is = 1.0 / std::sqrt(st.var_biased[c] + eps);
    (*inv_std)[c] = is;
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t i = 0; i < inner; ++i) {
        const std::size_t idx = (b * C + c) * inner + i;
        (*xhat)[idx] = (xv[idx] - mu) * is;
        y[idx] = gamma.value()[c] * (*xhat)[idx] + beta.value()[c];
      }
  }
  if (stats) *stats = std::move(st);
  return detail::tape_of(x).record(
      "batch_norm_train", {x, gamma, beta}, std::move(y),
      [xhat, inv_std, gamma, B, C, inner, count](const Tensor& g, std::span<Tensor* const> s) {
        for (std::size_t c = 0; c < C; ++c) {
          double sg = 0.0, sgx = 0.0;
          for (std::size_t b = 0; b < B; ++b)
            for (std::size_t i = 0; i < inner; ++i) {
              const std::size_t idx = (b * C + c) * inner + i;
              sg += g[idx];
              sgx += g[idx] * (*xhat)[idx];
            }
          if (s[1]) (*s[1])[c] += sgx;
          if (s[2]) (*s[2])[c] += sg;
          if (s[0]) {
            const double gm = gamma.value()[c];
            const double k = gm * (*inv_std)[c] / static_cast<double>(count);
            for (std::size_t b = 0; b < B; ++b)
              for (std::size_t i = 0; i < inner; ++i) {
                const std::size_t idx = (b * C + c) * inner + i;
                (*s[0])[idx] += k * (static_cast<double>(count) * g[idx] - sg - (*xhat)[idx] * sgx);
              }
          }
        }
      });
}

/// Batch normalization over axis 1 with fixed (running) statistics.
inline Var batch_norm_eval(const Var& x, const Var& gamma, const Var& beta, std::span<const double> mean,
                           std::span<const double> var, double eps) {
  const Tensor& xv = x.value();
  if (xv.rank() < 2) throw ShapeError("batch_norm: expected (B,C,...)");
  const std::size_t B = xv.dim(0), C = xv.dim(1);
  if (mean.size() != C || var.size() != C) throw ShapeError("batch_norm_eval: statistics size");
  const std::size_t inner = xv.size() / std::max<std::size_t>(B * C, 1);
  auto xhat = std::make_shared<Tensor>(xv.shape());
  auto inv_std = std::make_shared<std::vector<double>>(C);
  Tensor y(xv.shape());
  for (std::size_t c = 0; c < C; ++c) {
    const double is = 1.0 / std::sqrt(var[c] + eps);
    (*inv_std)[c] = is;
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t i = 0; i < inner; ++i) {
        const std::size_t idx = (b * C + c) * inner + i;
        (*xhat)[idx] = (xv[idx] - mean[c]) * is;
        y[idx] = gamma.value()[c] * (*xhat)[idx] + beta.value()[c];
      }
  }
  return detail::tape_of(x).record("batch_norm_eval", {x, gamma, beta}, std::move(y),
                                   [xhat, inv_std, gamma, B, C, inner](const Tensor& g, std::span<Tensor* const> s) {
                                     for (std::size_t c = 0; c < C; ++c)
                                       for (std::size_t b = 0; b < B; ++b)
                                         for (std::size_t i = 0; i < inner; ++i) {
                                           const std::size_t idx = (b * C + c) * inner + i;
                                           if (s[0]) (*s[0])[idx] += g[idx] * gamma.value()[c] * (*inv_std)[c];
                                           if (s[1]) (*s[1])[c] += g[idx] * (*xhat)[idx];
                                           if (s[2]) (*s[2])[c] += g[idx];
                                         }
                                   });
}

/// Affine map x (B,in) -> x W^T + bias, W (out,in), bias (out).
inline Var linear(const Var& x, const Var& w, const Var& bias) {
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  if (xv.rank() != 2 || wv.rank() != 2 || xv.dim(1) != wv.dim(1) || bias.value().shape() != Shape{wv.dim(0)})
    throw ShapeError("linear: x " + shape_str(xv.shape()) + ", W " + shape_str(wv.shape()) + ", b " +
                     shape_str(bias.value().shape()));
  const std::size_t B = xv.dim(0), in = xv.dim(1), out = wv.dim(0);
  Tensor y({B, out});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t o = 0; o < out; ++o) {
      double acc = bias.value()[o];
      for (std::size_t i = 0; i < in; ++i) acc += wv[o * in + i] * xv[b * in + i];
      y[b * out + o] = acc;
    }
  return detail::tape_of(x).record("linear", {x, w, bias}, std::move(y), [x, w, B, in, out](const Tensor& g, std::span<Tensor* const> s) {
    const Tensor& xv = x.value();
    const Tensor& wv = w.value();
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t o = 0; o < out; ++o) {
        const double go = g[b * out + o];
        if (s[2]) (*s[2])[o] += go;
        for (std::size_t i = 0; i < in; ++i) {
          if (s[0]) (*s[0])[b * in + i] += go * wv[o * in + i];
          if (s[1]) (*s[1])[o * in + i] += go * xv[b * in + i];
        }
      }
  });
}

/// Mean negative log-likelihood of log-softmax(logits) at the given labels.
inline Var cross_entropy(const Var& logits, std::vector<std::size_t> labels) {
  const Tensor& lv = logits.value();
  if (lv.rank() != 2 || lv.dim(0) != labels.size() || labels.empty())
    throw ShapeError("cross_entropy: logits " + shape_str(lv.shape()) + " vs " + std::to_string(labels.size()) + " labels");
  const std::size_t B = lv.dim(0), C = lv.dim(1);
  auto probs = std::make_shared<Tensor>(lv.shape());
  double loss = 0.0;
  for (std::size_t b = 0; b < B; ++b) {
    if (labels[b] >= C) throw ShapeError("cross_entropy: label out of range");
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < C; ++c) mx = std::max(mx, lv[b * C + c]);
    double z = 0.0;
    for (std::size_t c = 0; c < C; ++c) z += std::exp(lv[b * C + c] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t c = 0; c < C; ++c) (*probs)[b * C + c] = std::exp(lv[b * C + c] - lse);
    loss -= lv[b * C + labels[b]] - lse;
  }
  loss /= static_cast<double>(B);
  return detail::tape_of(logits).record("cross_entropy", {logits}, Tensor::scalar(loss),
                                        [probs, labels = std::move(labels), B, C](const Tensor& g, std::span<Tensor* const> s) {
                                          const double w = g[0] / static_cast<double>(B);
                                          for (std::size_t b = 0; b < B; ++b)
                                            for (std::size_t c = 0; c < C; ++c)
                                              (*s[0])[b * C + c] += w * ((*probs)[b * C + c] - (c == labels[b] ? 1.0 : 0.0));
                                        });
}

}  // namespace tmknet::ad

#endif  // TMKNET_AUTODIFF_HPP
