#pragma once

// Dense row-major tensors and the arithmetic every other module builds on.
//
// A tensor is a shape plus a flat row-major buffer. Most kernels treat a
// tensor as a matrix whose rows run along the first extent and whose columns
// are the flattened trailing extents; `as_matrix` exposes exactly that view to
// Eigen. All kernels are serial and deterministic: for fixed inputs they
// perform the same operations in the same order on every run.

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numbers>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "slim/errors.hpp"
#include "slim/instrument.hpp"

namespace slim {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

template <typename Scalar>
class BasicTensor {
 public:
  using value_type = Scalar;
  using Storage = std::vector<Scalar, TrackedAllocator<Scalar>>;
  using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using MatrixMap = Eigen::Map<RowMatrix>;
  using ConstMatrixMap = Eigen::Map<const RowMatrix>;

  BasicTensor() = default;

  explicit BasicTensor(Shape shape, Scalar fill = Scalar(0))
      : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

  BasicTensor(Shape shape, std::initializer_list<Scalar> values)
      : shape_(std::move(shape)), data_(values.begin(), values.end()) {
    if (data_.size() != shape_numel(shape_)) {
      throw DimensionError("initializer has " + std::to_string(data_.size()) +
                           " values for shape " + shape_string(shape_));
    }
  }

  static BasicTensor from_values(Shape shape, std::span<const Scalar> values) {
    if (values.size() != shape_numel(shape)) {
      throw DimensionError("value count " + std::to_string(values.size()) +
                           " does not match shape " + shape_string(shape));
    }
    BasicTensor t;
    t.shape_ = std::move(shape);
    t.data_.assign(values.begin(), values.end());
    return t;
  }

  static BasicTensor zeros_like(const BasicTensor& other) { return BasicTensor(other.shape_); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t extent(std::size_t axis) const { return shape_.at(axis); }
  std::size_t numel() const { return data_.size(); }
  bool empty() const { return data_.empty(); }
  std::size_t bytes() const { return data_.size() * sizeof(Scalar); }

  // Matrix view: first extent by the product of the trailing extents.
  std::size_t rows() const { return shape_.empty() ? 1 : shape_[0]; }
  std::size_t row_size() const { return rows() == 0 ? 0 : numel() / rows(); }

  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }
  std::span<Scalar> values() { return {data_.data(), data_.size()}; }
  std::span<const Scalar> values() const { return {data_.data(), data_.size()}; }
  std::span<Scalar> row(std::size_t i) { return {data_.data() + i * row_size(), row_size()}; }
  std::span<const Scalar> row(std::size_t i) const {
    return {data_.data() + i * row_size(), row_size()};
  }

  Scalar& operator[](std::size_t i) { return data_[i]; }
  const Scalar& operator[](std::size_t i) const { return data_[i]; }
  Scalar& operator()(std::size_t i, std::size_t j) { return data_[i * row_size() + j]; }
  const Scalar& operator()(std::size_t i, std::size_t j) const {
    return data_[i * row_size() + j];
  }

  MatrixMap as_matrix() {
    return MatrixMap(data_.data(), static_cast<Eigen::Index>(rows()),
                     static_cast<Eigen::Index>(row_size()));
  }
  ConstMatrixMap as_matrix() const {
    return ConstMatrixMap(data_.data(), static_cast<Eigen::Index>(rows()),
                          static_cast<Eigen::Index>(row_size()));
  }

  void fill(Scalar v) { std::fill(data_.begin(), data_.end(), v); }

  BasicTensor reshaped(Shape shape) const {
    if (shape_numel(shape) != numel()) {
      throw DimensionError("cannot reshape " + shape_string(shape_) + " to " +
                           shape_string(shape));
    }
    BasicTensor t = *this;
    t.shape_ = std::move(shape);
    return t;
  }

  // Frees the buffer; the tensor becomes empty.
  void release() {
    Storage().swap(data_);
    shape_.clear();
  }

  friend bool operator==(const BasicTensor& a, const BasicTensor& b) {
    return a.shape_ == b.shape_ && std::equal(a.data_.begin(), a.data_.end(), b.data_.begin());
  }

 private:
  Shape shape_;
  Storage data_;
};

using Tensor = BasicTensor<double>;

// ---------------------------------------------------------------------------
// Shape checks.

template <typename Scalar>
void require_rank(const BasicTensor<Scalar>& t, std::size_t rank, const char* what) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(what) + ": expected rank " + std::to_string(rank) +
                         ", got " + shape_string(t.shape()));
  }
}

template <typename Scalar>
void require_same_shape(const BasicTensor<Scalar>& a, const BasicTensor<Scalar>& b,
                        const char* what) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(what) + ": shape mismatch " + shape_string(a.shape()) +
                         " vs " + shape_string(b.shape()));
  }
}

// ---------------------------------------------------------------------------
// Contractions.

template <typename Scalar>
BasicTensor<Scalar> matmul(const BasicTensor<Scalar>& a, const BasicTensor<Scalar>& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  if (a.extent(1) != b.extent(0)) {
    throw DimensionError("matmul: inner extents differ, " + shape_string(a.shape()) + " x " +
                         shape_string(b.shape()));
  }
  BasicTensor<Scalar> out({a.extent(0), b.extent(1)});
  out.as_matrix().noalias() = a.as_matrix() * b.as_matrix();
  charge_flops(a.extent(0) * a.extent(1) * b.extent(1));
  return out;
}

// out += op(a) * op(b) where op transposes when requested.
template <typename Scalar>
void matmul_accumulate(BasicTensor<Scalar>& out, const BasicTensor<Scalar>& a, bool transpose_a,
                       const BasicTensor<Scalar>& b, bool transpose_b) {
  require_rank(a, 2, "matmul_accumulate");
  require_rank(b, 2, "matmul_accumulate");
  const std::size_t m = transpose_a ? a.extent(1) : a.extent(0);
  const std::size_t k = transpose_a ? a.extent(0) : a.extent(1);
  const std::size_t kb = transpose_b ? b.extent(1) : b.extent(0);
  const std::size_t n = transpose_b ? b.extent(0) : b.extent(1);
  if (k != kb || out.rows() != m || out.row_size() != n) {
    throw DimensionError("matmul_accumulate: incompatible operands");
  }
  auto o = out.as_matrix();
  auto am = a.as_matrix();
  auto bm = b.as_matrix();
  if (transpose_a && transpose_b) {
    o.noalias() += am.transpose() * bm.transpose();
  } else if (transpose_a) {
    o.noalias() += am.transpose() * bm;
  } else if (transpose_b) {
    o.noalias() += am * bm.transpose();
  } else {
    o.noalias() += am * bm;
  }
  charge_flops(m * k * n);
}

template <typename Scalar>
Scalar dot(const BasicTensor<Scalar>& a, const BasicTensor<Scalar>& b) {
  if (a.numel() != b.numel()) throw DimensionError("dot: element counts differ");
  Scalar s = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) s += a[i] * b[i];
  charge_flops(a.numel());
  return s;
}

// ---------------------------------------------------------------------------
// Elementwise arithmetic.

template <typename Scalar, typename F>
BasicTensor<Scalar> map(const BasicTensor<Scalar>& x, F&& f) {
  BasicTensor<Scalar> out(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) out[i] = f(x[i]);
  charge_flops(x.numel());
  return out;
}

template <typename Scalar, typename F>
BasicTensor<Scalar> zip(const BasicTensor<Scalar>& a, const BasicTensor<Scalar>& b, F&& f,
                        const char* what) {
  require_same_shape(a, b, what);
  BasicTensor<Scalar> out(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) out[i] = f(a[i], b[i]);
  charge_flops(a.numel());
  return out;
}

template <typename Scalar>
BasicTensor<Scalar> add(const BasicTensor<Scalar>& a, const BasicTensor<Scalar>& b) {
  return zip(a, b, std::plus<Scalar>(), "add");
}

template <typename Scalar>
BasicTensor<Scalar> sub(const BasicTensor<Scalar>& a, const BasicTensor<Scalar>& b) {
  return zip(a, b, std::minus<Scalar>(), "sub");
}

template <typename Scalar>
BasicTensor<Scalar> hadamard(const BasicTensor<Scalar>& a, const BasicTensor<Scalar>& b) {
  return zip(a, b, std::multiplies<Scalar>(), "hadamard");
}

template <typename Scalar>
BasicTensor<Scalar> scale(const BasicTensor<Scalar>& x, Scalar c) {
  return map(x, [c](Scalar v) { return c * v; });
}

// y += alpha * x
template <typename Scalar>
void axpy(BasicTensor<Scalar>& y, Scalar alpha, const BasicTensor<Scalar>& x) {
  if (y.numel() != x.numel()) throw DimensionError("axpy: element counts differ");
  for (std::size_t i = 0; i < x.numel(); ++i) y[i] += alpha * x[i];
  charge_flops(x.numel());
}

// Adds `row` (one row's worth of elements) to every row of x.
template <typename Scalar>
BasicTensor<Scalar> add_row_broadcast(const BasicTensor<Scalar>& x,
                                      const BasicTensor<Scalar>& row) {
  if (row.numel() != x.row_size()) {
    throw DimensionError("add_row_broadcast: row has " + std::to_string(row.numel()) +
                         " elements, tensor rows have " + std::to_string(x.row_size()));
  }
  BasicTensor<Scalar> out = x;
  const std::size_t w = x.row_size();
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < w; ++j) out[i * w + j] += row[j];
  charge_flops(x.numel());
  return out;
}

template <typename Scalar>
Scalar sum(const BasicTensor<Scalar>& x) {
  Scalar s = 0;
  for (auto v : x.values()) s += v;
  charge_flops(x.numel());
  return s;
}

// Column sums: the adjoint of add_row_broadcast.
template <typename Scalar>
BasicTensor<Scalar> sum_rows(const BasicTensor<Scalar>& x) {
  BasicTensor<Scalar> out({1, x.row_size()});
  const std::size_t w = x.row_size();
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < w; ++j) out[j] += x[i * w + j];
  charge_flops(x.numel());
  return out;
}

template <typename Scalar>
BasicTensor<Scalar> square(const BasicTensor<Scalar>& x) {
  return map(x, [](Scalar v) { return v * v; });
}

// ---------------------------------------------------------------------------
// Scans along the first extent.

// Row i of the result is seed + z_0 + ... + z_i, accumulated left to right.
// An empty seed means zero.
template <typename Scalar>
BasicTensor<Scalar> prefix_sum(const BasicTensor<Scalar>& z,
                               std::span<const Scalar> seed = {}) {
  if (z.rank() == 0 || z.extent(0) == 0) {
    throw DimensionError("prefix_sum: first extent must be at least 1, got " +
                         shape_string(z.shape()));
  }
  const std::size_t w = z.row_size();
  if (!seed.empty() && seed.size() != w) {
    throw DimensionError("prefix_sum: seed width does not match rows");
  }
  BasicTensor<Scalar> out(z.shape());
  for (std::size_t j = 0; j < w; ++j) out[j] = (seed.empty() ? Scalar(0) : seed[j]) + z[j];
  for (std::size_t i = 1; i < z.rows(); ++i)
    for (std::size_t j = 0; j < w; ++j) out[i * w + j] = out[(i - 1) * w + j] + z[i * w + j];
  charge_flops(z.numel());
  return out;
}

// Row i of the result is z_i + ... + z_{L-1}; the adjoint of prefix_sum.
template <typename Scalar>
BasicTensor<Scalar> suffix_sum(const BasicTensor<Scalar>& z) {
  if (z.rank() == 0 || z.extent(0) == 0) {
    throw DimensionError("suffix_sum: first extent must be at least 1, got " +
                         shape_string(z.shape()));
  }
  const std::size_t w = z.row_size();
  BasicTensor<Scalar> out(z.shape());
  const std::size_t last = z.rows() - 1;
  for (std::size_t j = 0; j < w; ++j) out[last * w + j] = z[last * w + j];
  for (std::size_t i = last; i-- > 0;)
    for (std::size_t j = 0; j < w; ++j) out[i * w + j] = out[(i + 1) * w + j] + z[i * w + j];
  charge_flops(z.numel());
  return out;
}

template <typename Scalar>
BasicTensor<Scalar> reverse_rows(const BasicTensor<Scalar>& z) {
  BasicTensor<Scalar> out(z.shape());
  const std::size_t w = z.row_size();
  for (std::size_t i = 0; i < z.rows(); ++i)
    std::copy_n(z.data() + (z.rows() - 1 - i) * w, w, out.data() + i * w);
  return out;
}

// ---------------------------------------------------------------------------
// Normalization and activations.

template <typename Scalar>
struct LayerNormResult {
  BasicTensor<Scalar> output;
  BasicTensor<Scalar> normalized;  // (x - mean) * rstd
  BasicTensor<Scalar> rstd;        // one entry per row
};

template <typename Scalar>
LayerNormResult<Scalar> layer_norm_with_stats(const BasicTensor<Scalar>& x,
                                              const BasicTensor<Scalar>& gain,
                                              const BasicTensor<Scalar>& bias, Scalar eps) {
  require_rank(x, 2, "layer_norm");
  const std::size_t n = x.extent(0), d = x.extent(1);
  if (d == 0 || gain.numel() != d || bias.numel() != d) {
    throw DimensionError("layer_norm: gain/bias must have one entry per column");
  }
  LayerNormResult<Scalar> r{BasicTensor<Scalar>(x.shape()), BasicTensor<Scalar>(x.shape()),
                            BasicTensor<Scalar>({n})};
  for (std::size_t i = 0; i < n; ++i) {
    const Scalar* xi = x.data() + i * d;
    Scalar mean = 0;
    for (std::size_t j = 0; j < d; ++j) mean += xi[j];
    mean /= Scalar(d);
    Scalar var = 0;
    for (std::size_t j = 0; j < d; ++j) var += (xi[j] - mean) * (xi[j] - mean);
    var /= Scalar(d);
    const Scalar rstd = Scalar(1) / std::sqrt(var + eps);
    r.rstd[i] = rstd;
    for (std::size_t j = 0; j < d; ++j) {
      const Scalar xhat = (xi[j] - mean) * rstd;
      r.normalized[i * d + j] = xhat;
      r.output[i * d + j] = xhat * gain[j] + bias[j];
    }
  }
  charge_flops(5 * x.numel());
  return r;
}

template <typename Scalar>
BasicTensor<Scalar> layer_norm(const BasicTensor<Scalar>& x, const BasicTensor<Scalar>& gain,
                               const BasicTensor<Scalar>& bias, Scalar eps) {
  return layer_norm_with_stats(x, gain, bias, eps).output;
}

// GeLU, tanh approximation.
template <typename Scalar>
Scalar gelu(Scalar x) {
  constexpr Scalar kC = Scalar(0.7978845608028654);  // sqrt(2/pi)
  const Scalar u = kC * (x + Scalar(0.044715) * x * x * x);
  return Scalar(0.5) * x * (Scalar(1) + std::tanh(u));
}

template <typename Scalar>
Scalar gelu_derivative(Scalar x) {
  constexpr Scalar kC = Scalar(0.7978845608028654);
  const Scalar u = kC * (x + Scalar(0.044715) * x * x * x);
  const Scalar t = std::tanh(u);
  const Scalar du = kC * (Scalar(1) + Scalar(3 * 0.044715) * x * x);
  return Scalar(0.5) * (Scalar(1) + t) + Scalar(0.5) * x * (Scalar(1) - t * t) * du;
}

template <typename Scalar>
BasicTensor<Scalar> gelu(const BasicTensor<Scalar>& x) {
  return map(x, [](Scalar v) { return gelu(v); });
}

// ---------------------------------------------------------------------------
// Comparisons used by tests and the benchmark harness.

template <typename Scalar>
Scalar l2_norm(std::span<const Scalar> v) {
  Scalar s = 0;
  for (auto x : v) s += x * x;
  return std::sqrt(s);
}

// ||a - b||_2 / ||b||_2 (plain ||a - b||_2 when b is zero).
template <typename Scalar>
Scalar relative_l2(std::span<const Scalar> a, std::span<const Scalar> b) {
  if (a.size() != b.size()) throw DimensionError("relative_l2: lengths differ");
  Scalar diff = 0, ref = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    ref += b[i] * b[i];
  }
  return ref > 0 ? std::sqrt(diff / ref) : std::sqrt(diff);
}

template <typename Scalar>
Scalar relative_l2(const BasicTensor<Scalar>& a, const BasicTensor<Scalar>& b) {
  return relative_l2(a.values(), b.values());
}

template <typename Scalar>
Scalar max_abs_diff(const BasicTensor<Scalar>& a, const BasicTensor<Scalar>& b) {
  require_same_shape(a, b, "max_abs_diff");
  Scalar m = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace slim
