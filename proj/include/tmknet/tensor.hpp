#ifndef TMKNET_TENSOR_HPP
#define TMKNET_TENSOR_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "tmknet/error.hpp"

namespace tmknet {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ')';
  return os.str();
}

/// Dense row-major tensor of doubles. Axis semantics belong to the caller.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != shape_size(shape_))
      throw ShapeError("Tensor: data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_str(shape_));
  }

  static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

  static Tensor matrix(std::size_t rows, std::size_t cols, std::initializer_list<double> values) {
    return Tensor({rows, cols}, std::vector<double>(values));
  }

  static Tensor identity(std::size_t n) {
    Tensor t({n, n});
    for (std::size_t i = 0; i < n; ++i) t.data_[i * n + i] = 1.0;
    return t;
  }

  static Tensor diag(std::span<const double> d) {
    const std::size_t n = d.size();
    Tensor t({n, n});
    for (std::size_t i = 0; i < n; ++i) t.data_[i * n + i] = d[i];
    return t;
  }

  static Tensor diag(std::initializer_list<double> d) {
    return diag(std::span<const double>(d.begin(), d.size()));
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }
  std::size_t dim(std::size_t axis) const {
    if (axis >= shape_.size()) throw ShapeError("Tensor::dim: axis out of range");
    return shape_[axis];
  }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::vector<double>& vec() { return data_; }
  const std::vector<double>& vec() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  /// Row-major multi-index access; the number of indices must equal the rank.
  template <class... I>
  double& at(I... idx) {
    return data_[offset({static_cast<std::size_t>(idx)...})];
  }
  template <class... I>
  double at(I... idx) const {
    return data_[offset({static_cast<std::size_t>(idx)...})];
  }

  double item() const {
    if (data_.size() != 1) throw ShapeError("Tensor::item on tensor of shape " + shape_str(shape_));
    return data_[0];
  }

  Tensor reshaped(Shape shape) const {
    if (shape_size(shape) != data_.size())
      throw ShapeError("reshape " + shape_str(shape_) + " -> " + shape_str(shape));
    return Tensor(std::move(shape), data_);
  }

  /// Copy of slice `i` along the leading axis.
  Tensor slice(std::size_t i) const {
    if (rank() == 0 || i >= shape_[0]) throw ShapeError("Tensor::slice out of range");
    Shape sub(shape_.begin() + 1, shape_.end());
    const std::size_t n = shape_size(sub);
    return Tensor(std::move(sub), std::vector<double>(data_.begin() + static_cast<std::ptrdiff_t>(i * n),
                                                      data_.begin() + static_cast<std::ptrdiff_t>((i + 1) * n)));
  }

  void set_slice(std::size_t i, const Tensor& s) {
    if (rank() == 0 || i >= shape_[0]) throw ShapeError("Tensor::set_slice out of range");
    const std::size_t n = data_.size() / shape_[0];
    if (s.size() != n) throw ShapeError("Tensor::set_slice size mismatch");
    std::copy(s.data_.begin(), s.data_.end(), data_.begin() + static_cast<std::ptrdiff_t>(i * n));
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  Tensor& operator+=(const Tensor& o) {
    check_same(o, "+=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }
  Tensor& operator-=(const Tensor& o) {
    check_same(o, "-=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= o.data_[i];
    return *this;
  }
  Tensor& operator*=(double s) {
    for (double& v : data_) v *= s;
    return *this;
  }

  bool operator==(const Tensor& o) const = default;

  void check_same(const Tensor& o, const char* what) const {
    if (shape_ != o.shape_)
      throw ShapeError(std::string(what) + ": shape " + shape_str(shape_) + " vs " + shape_str(o.shape_));
  }

 private:
  std::size_t offset(std::initializer_list<std::size_t> idx) const {
    if (idx.size() != shape_.size()) throw ShapeError("Tensor::at: index rank mismatch");
    std::size_t off = 0;
    std::size_t axis = 0;
    for (std::size_t i : idx) {
      if (i >= shape_[axis]) throw ShapeError("Tensor::at: index out of range");
      off = off * shape_[axis] + i;
      ++axis;
    }
    return off;
  }

  Shape shape_;
  std::vector<double> data_;
};

inline Tensor operator+(Tensor a, const Tensor& b) { return a += b; }
inline Tensor operator-(Tensor a, const Tensor& b) { return a -= b; }
inline Tensor operator*(Tensor a, double s) { return a *= s; }
inline Tensor operator*(double s, Tensor a) { return a *= s; }

inline void require_matrix(const Tensor& m, const char* who) {
  if (m.rank() != 2) throw ShapeError(std::string(who) + ": expected a matrix, got " + shape_str(m.shape()));
}

inline void require_square(const Tensor& m, const char* who) {
  if (m.rank() != 2 || m.dim(0) != m.dim(1))
    throw ShapeError(std::string(who) + ": expected a square matrix, got " + shape_str(m.shape()));
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const std::size_t n = a.dim(0), k = a.dim(1), m = b.dim(1);
  if (b.dim(0) != k) throw ShapeError("matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  Tensor c({n, m});
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  double* pc = c.data().data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const double av = pa[i * k + p];
      if (av == 0.0) continue;
      for (std::size_t j = 0; j < m; ++j) pc[i * m + j] += av * pb[p * m + j];
    }
  return c;
}

inline Tensor transpose(const Tensor& a) {
  require_matrix(a, "transpose");
  const std::size_t n = a.dim(0), m = a.dim(1);
  Tensor t({m, n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) t[j * n + i] = a[i * m + j];
  return t;
}

/// a * b * a^T
inline Tensor congruence(const Tensor& a, const Tensor& b) { return matmul(matmul(a, b), transpose(a)); }

inline Tensor symmetrize(const Tensor& m) {
  require_square(m, "symmetrize");
  const std::size_t n = m.dim(0);
  Tensor s(m.shape());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) s[i * n + j] = 0.5 * (m[i * n + j] + m[j * n + i]);
  return s;
}

inline double frobenius_norm(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v * v;
  return std::sqrt(s);
}

inline double dot(const Tensor& a, const Tensor& b) {
  a.check_same(b, "dot");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double trace(const Tensor& m) {
  require_square(m, "trace");
  double s = 0.0;
  for (std::size_t i = 0; i < m.dim(0); ++i) s += m.at(i, i);
  return s;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  a.check_same(b, "max_abs_diff");
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) d = std::max(d, std::abs(a[i] - b[i]));
  return d;
}

/// Stacks equally shaped tensors along a new leading axis.
inline Tensor stack(std::span<const Tensor> parts, const Shape& element_shape) {
  Shape shape{parts.size()};
  shape.insert(shape.end(), element_shape.begin(), element_shape.end());
  Tensor out(shape);
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (parts[i].shape() != element_shape) throw ShapeError("stack: element shape mismatch");
    out.set_slice(i, parts[i]);
  }
  return out;
}

inline Tensor stack(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("stack: empty list needs an explicit element shape");
  return stack(std::span<const Tensor>(parts), parts.front().shape());
}

}  // namespace tmknet

#endif  // TMKNET_TENSOR_HPP
