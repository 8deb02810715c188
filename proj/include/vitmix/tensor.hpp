#pragma once

// Dense row-major float64 tensor and the handful of kernels the ViT and the
// attribution math are written against. Every op checks shapes up front and
// throws DimensionError instead of broadcasting.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "vitmix/errors.hpp"

namespace vitmix {

using Shape = std::vector<std::size_t>;

inline std::string shape_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

inline std::size_t shape_product(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0) : shape_(std::move(shape)) {
    check_extents();
    data_.assign(shape_product(shape_), fill);
  }

  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_extents();
    if (data_.size() != shape_product(shape_))
      throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                           " does not match shape " + shape_string(shape_));
  }

  static Tensor vector(std::initializer_list<double> values) {
    return Tensor({values.size()}, std::vector<double>(values));
  }

  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<double> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw DimensionError("ragged matrix literal");
      data.insert(data.end(), row.begin(), row.end());
    }
    return Tensor({r, c}, std::move(data));
  }

  static Tensor identity(std::size_t n) {
    Tensor t({n, n});
    for (std::size_t i = 0; i < n; ++i) t.at(i, i) = 1.0;
    return t;
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }
  const std::vector<double>& data() const noexcept { return data_; }

  double& operator[](std::size_t i) noexcept { return data_[i]; }
  double operator[](std::size_t i) const noexcept { return data_[i]; }

  double& at(std::size_t i, std::size_t j) noexcept { return data_[i * shape_[1] + j]; }
  double at(std::size_t i, std::size_t j) const noexcept { return data_[i * shape_[1] + j]; }
  double& at(std::size_t i, std::size_t j, std::size_t k) noexcept {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }
  double at(std::size_t i, std::size_t j, std::size_t k) const noexcept {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }

  // Row i of a rank-2 tensor.
  std::span<double> row(std::size_t i) noexcept { return {data_.data() + i * shape_[1], shape_[1]}; }
  std::span<const double> row(std::size_t i) const noexcept {
    return {data_.data() + i * shape_[1], shape_[1]};
  }

  Tensor reshaped(Shape shape) const {
    if (shape_product(shape) != data_.size())
      throw DimensionError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
    return Tensor(std::move(shape), data_);
  }

  // Copy of the sub-tensor at `index` along the leading axis.
  Tensor slice(std::size_t index) const {
    if (rank() < 2 || index >= shape_[0])
      throw DimensionError("slice " + std::to_string(index) + " out of range for " + shape_string(shape_));
    Shape sub(shape_.begin() + 1, shape_.end());
    const std::size_t n = shape_product(sub);
    return Tensor(std::move(sub), std::vector<double>(data_.begin() + static_cast<std::ptrdiff_t>(index * n),
                                                      data_.begin() + static_cast<std::ptrdiff_t>((index + 1) * n)));
  }

  void set_slice(std::size_t index, const Tensor& sub) {
    if (rank() < 2 || index >= shape_[0] || Shape(shape_.begin() + 1, shape_.end()) != sub.shape())
      throw DimensionError("cannot place " + shape_string(sub.shape()) + " into " + shape_string(shape_));
    std::copy(sub.data_.begin(), sub.data_.end(), data_.begin() + static_cast<std::ptrdiff_t>(index * sub.size()));
  }

  bool operator==(const Tensor&) const = default;

 private:
  void check_extents() const {
    for (std::size_t e : shape_)
      if (e == 0) throw DimensionError("zero extent in shape " + shape_string(shape_));
  }

  Shape shape_;
  std::vector<double> data_;
};

inline void require_shape(const Tensor& t, const Shape& expected, const char* what) {
  if (t.shape() != expected)
    throw DimensionError(std::string(what) + ": expected " + shape_string(expected) + ", got " +
                         shape_string(t.shape()));
}

inline void require_rank(const Tensor& t, std::size_t rank, const char* what) {
  if (t.rank() != rank)
    throw DimensionError(std::string(what) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_string(t.shape()));
}

inline bool all_finite(const Tensor& t) {
  return std::all_of(t.values().begin(), t.values().end(), [](double v) { return std::isfinite(v); });
}

inline double sum(const Tensor& t) { return std::accumulate(t.values().begin(), t.values().end(), 0.0); }

inline double max_value(const Tensor& t) { return *std::max_element(t.values().begin(), t.values().end()); }

inline double min_value(const Tensor& t) { return *std::min_element(t.values().begin(), t.values().end()); }

template <typename Fn>
Tensor map(const Tensor& t, Fn&& fn) {
  Tensor out = t;
  for (double& v : out.values()) v = fn(v);
  return out;
}

template <typename Fn>
Tensor zip(const Tensor& a, const Tensor& b, Fn&& fn) {
  if (a.shape() != b.shape())
    throw DimensionError("elementwise op on " + shape_string(a.shape()) + " and " + shape_string(b.shape()));
  Tensor out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fn(a[i], b[i]);
  return out;
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return zip(a, b, std::plus<>{}); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return zip(a, b, std::minus<>{}); }
inline Tensor hadamard(const Tensor& a, const Tensor& b) { return zip(a, b, std::multiplies<>{}); }
inline Tensor scaled(const Tensor& a, double s) {
  return map(a, [s](double v) { return v * s; });
}

// c[i][j] = sum_t a[i][t] * b[t][j]
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw DimensionError("matmul shape mismatch: " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor c({m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t t = 0; t < k; ++t) {
      const double av = a.at(i, t);
      if (av == 0.0) continue;
      for (std::size_t j = 0; j < n; ++j) c.at(i, j) += av * b.at(t, j);
    }
  return c;
}

inline Tensor transpose(const Tensor& a) {
  require_rank(a, 2, "transpose");
  Tensor t({a.dim(1), a.dim(0)});
  for (std::size_t i = 0; i < a.dim(0); ++i)
    for (std::size_t j = 0; j < a.dim(1); ++j) t.at(j, i) = a.at(i, j);
  return t;
}

// a^T b without materializing the transpose.
inline Tensor matmul_tn(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(0) != b.dim(0))
    throw DimensionError("matmul_tn shape mismatch: " + shape_string(a.shape()) + "^T x " +
                         shape_string(b.shape()));
  const std::size_t k = a.dim(0), m = a.dim(1), n = b.dim(1);
  Tensor c({m, n});
  for (std::size_t t = 0; t < k; ++t)
    for (std::size_t i = 0; i < m; ++i) {
      const double av = a.at(t, i);
      if (av == 0.0) continue;
      for (std::size_t j = 0; j < n; ++j) c.at(i, j) += av * b.at(t, j);
    }
  return c;
}

// a b^T
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1))
    throw DimensionError("matmul_nt shape mismatch: " + shape_string(a.shape()) + " x " +
                         shape_string(b.shape()) + "^T");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  Tensor c({m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t t = 0; t < k; ++t) s += a.at(i, t) * b.at(j, t);
      c.at(i, j) = s;
    }
  return c;
}

// Adds `bias` (length = last extent) to every row.
inline Tensor add_bias(Tensor x, const Tensor& bias) {
  const std::size_t d = x.shape().back();
  require_shape(bias, {d}, "bias");
  for (std::size_t i = 0; i < x.size(); ++i) x[i] += bias[i % d];
  return x;
}

// Sum over rows of a rank-2 tensor.
inline Tensor column_sums(const Tensor& x) {
  require_rank(x, 2, "column_sums");
  Tensor out({x.dim(1)});
  for (std::size_t i = 0; i < x.dim(0); ++i)
    for (std::size_t j = 0; j < x.dim(1); ++j) out[j] += x.at(i, j);
  return out;
}

// Numerically stable softmax over the last axis.
inline Tensor softmax_rows(const Tensor& x) {
  if (x.rank() == 0 || x.empty()) throw DimensionError("softmax_rows on empty tensor");
  const std::size_t n = x.shape().back();
  Tensor out = x;
  auto vals = out.values();
  for (std::size_t base = 0; base < out.size(); base += n) {
    auto row = vals.subspan(base, n);
    const double m = *std::max_element(row.begin(), row.end());
    double total = 0.0;
    for (double& v : row) {
      v = std::exp(v - m);
      total += v;
    }
    for (double& v : row) v /= total;
  }
  return out;
}

inline constexpr double kLayerNormEps = 1e-6;

inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = kLayerNormEps) {
  if (x.rank() == 0 || x.empty()) throw DimensionError("layer_norm on empty tensor");
  const std::size_t d = x.shape().back();
  require_shape(gamma, {d}, "layer_norm gamma");
  require_shape(beta, {d}, "layer_norm beta");
  Tensor out = x;
  auto vals = out.values();
  for (std::size_t base = 0; base < out.size(); base += d) {
    auto row = vals.subspan(base, d);
    double mean = 0.0;
    for (double v : row) mean += v;
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (double v : row) var += (v - mean) * (v - mean);
    var /= static_cast<double>(d);
    const double rstd = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) row[j] = (row[j] - mean) * rstd * gamma[j] + beta[j];
  }
  return out;
}

// (x - min) / (max - min); a constant tensor maps to all zeros.
inline Tensor minmax_normalize(const Tensor& x) {
  if (x.empty()) return x;
  const double lo = min_value(x);
  const double hi = max_value(x);
  if (!(hi > lo)) return map(x, [](double) { return 0.0; });
  const double span = hi - lo;
  return map(x, [lo, span](double v) { return std::clamp((v - lo) / span, 0.0, 1.0); });
}

// Half-pixel-centre bilinear resampling (align_corners = false), edge-clamped.
inline Tensor bilinear_upsample(const Tensor& grid, std::size_t out_h, std::size_t out_w) {
  require_rank(grid, 2, "bilinear_upsample");
  if (out_h == 0 || out_w == 0) throw ArgumentError("bilinear_upsample: output extents must be positive");
  const std::size_t h = grid.dim(0), w = grid.dim(1);
  auto axis = [](std::size_t out_i, std::size_t in_n, std::size_t out_n) {
    double src = (static_cast<double>(out_i) + 0.5) * static_cast<double>(in_n) / static_cast<double>(out_n) - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in_n - 1));
    const auto i0 = static_cast<std::size_t>(std::floor(src));
    const std::size_t i1 = std::min(i0 + 1, in_n - 1);
    return std::tuple{i0, i1, src - static_cast<double>(i0)};
  };
  Tensor out({out_h, out_w});
  for (std::size_t y = 0; y < out_h; ++y) {
    const auto [y0, y1, fy] = axis(y, h, out_h);
    for (std::size_t x = 0; x < out_w; ++x) {
      const auto [x0, x1, fx] = axis(x, w, out_w);
      const double top = grid.at(y0, x0) * (1.0 - fx) + grid.at(y0, x1) * fx;
      const double bottom = grid.at(y1, x0) * (1.0 - fx) + grid.at(y1, x1) * fx;
      out.at(y, x) = top * (1.0 - fy) + bottom * fy;
    }
  }
  return out;
}

// Central-difference gradient of a scalar function. Used as the oracle for
// every hand-derived backward pass.
template <typename Fn>
Tensor finite_diff_grad(Fn&& f, const Tensor& x, double h = 1e-5) {
  if (!(h > 0.0)) throw ArgumentError("finite_diff_grad: step must be positive");
  Tensor grad(x.shape());
  Tensor probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + h;
    const double up = f(static_cast<const Tensor&>(probe));
    probe[i] = orig - h;
    const double down = f(static_cast<const Tensor&>(probe));
    probe[i] = orig;
    grad[i] = (up - down) / (2.0 * h);
  }
  return grad;
}

}  // namespace vitmix
