#pragma once

/// Dense row-major float64 arrays and the rank-2 kernels the autodiff layer
/// is built on. Everything here works on plain values; see autodiff.hpp for
/// the taped versions of the same operations.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "kflow/error.hpp"

namespace kflow {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    require(shape_size(shape_) == data_.size(),
            "Tensor: shape " + shape_str(shape_) + " does not match " + std::to_string(data_.size()) + " values");
  }

  static Tensor matrix(std::size_t rows, std::size_t cols, std::initializer_list<double> values) {
    return Tensor({rows, cols}, std::vector<double>(values));
  }
  static Tensor vector(std::initializer_list<double> values) {
    return Tensor({values.size()}, std::vector<double>(values));
  }
  static Tensor zeros(std::size_t rows, std::size_t cols) { return Tensor({rows, cols}); }
  static Tensor identity(std::size_t n) {
    Tensor t({n, n});
    for (std::size_t i = 0; i < n; ++i) t(i, i) = 1.0;
    return t;
  }
  static Tensor scalar(double v) { return Tensor({1, 1}, v); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  // Rank-1 tensors behave as a single row.
  std::size_t rows() const { return rank() >= 2 ? shape_[0] : 1; }
  std::size_t cols() const { return rank() >= 2 ? shape_[rank() - 1] : (rank() == 1 ? shape_[0] : 1); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }
  std::vector<double>& storage() { return data_; }
  const std::vector<double>& storage() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }
  double& operator()(std::size_t i, std::size_t j, std::size_t k) {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }
  double operator()(std::size_t i, std::size_t j, std::size_t k) const {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }

  double item() const {
    require(data_.size() == 1, "Tensor::item on tensor of shape " + shape_str(shape_));
    return data_[0];
  }

  Tensor reshaped(Shape s) const& { return Tensor(std::move(s), data_); }
  Tensor reshaped(Shape s) && { return Tensor(std::move(s), std::move(data_)); }

  /// View of a rank-1 tensor as an [n,1] column.
  Tensor as_column() const { return Tensor({size(), 1}, data_); }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }
  void check_finite(const std::string& what) const {
    if (!all_finite()) throw NumericalError(what + ": non-finite value");
  }

  bool operator==(const Tensor& o) const = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

inline bool same_shape(const Tensor& a, const Tensor& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() && a.size() == b.size();
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  require(same_shape(a, b), std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
}

// ---------------------------------------------------------------------------
// Value kernels. Matrix products accumulate each output row in a fixed order
// over the inner index, so results for one row do not depend on batch size.

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  require(a.cols() == b.rows(), "matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  Tensor c({m, n});
  const double* A = a.data();
  const double* B = b.data();
  double* C = c.data();
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = C + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = A[i * k + p];
      const double* brow = B + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
  return c;
}

inline Tensor transpose(const Tensor& a) {
  const std::size_t m = a.rows(), n = a.cols();
  Tensor t({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) t(j, i) = a(i, j);
  return t;
}

/// a^T * b
inline Tensor matmul_tn(const Tensor& a, const Tensor& b) {
  require(a.rows() == b.rows(), "matmul_tn: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  Tensor c({k, n});
  const double* A = a.data();
  const double* B = b.data();
  double* C = c.data();
  for (std::size_t i = 0; i < m; ++i) {
    const double* brow = B + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = A[i * k + p];
      double* crow = C + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
  return c;
}

/// a * b^T
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) { return matmul(a, transpose(b)); }

template <class Op>
Tensor map(const Tensor& a, Op op) {
  Tensor r(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) r[i] = op(a[i]);
  return r;
}

template <class Op>
Tensor zip(const Tensor& a, const Tensor& b, Op op, const char* name) {
  require_same_shape(a, b, name);
  Tensor r(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) r[i] = op(a[i], b[i]);
  return r;
}

inline Tensor add(const Tensor& a, const Tensor& b) { return zip(a, b, std::plus<>(), "add"); }
inline Tensor sub(const Tensor& a, const Tensor& b) { return zip(a, b, std::minus<>(), "sub"); }
inline Tensor mul(const Tensor& a, const Tensor& b) { return zip(a, b, std::multiplies<>(), "mul"); }
inline Tensor scale(const Tensor& a, double s) {
  return map(a, [s](double v) { return s * v; });
}

inline void add_inplace(Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add_inplace");
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
}

/// a[m,n] + row[1,n] broadcast over rows.
inline Tensor add_row(const Tensor& a, const Tensor& row) {
  require(row.size() == a.cols(), "add_row: row of " + std::to_string(row.size()) + " for " +
                                      std::to_string(a.cols()) + " columns");
  Tensor r = a;
  const std::size_t n = a.cols();
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < n; ++j) r[i * n + j] += row[j];
  return r;
}

inline Tensor column_sums(const Tensor& a) {
  const std::size_t n = a.cols();
  Tensor r({1, n});
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < n; ++j) r[j] += a[i * n + j];
  return r;
}

inline double sigmoid(double x) {
  return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}
inline double silu(double x) { return x * sigmoid(x); }
inline double silu_d(double x) {
  const double s = sigmoid(x);
  return s * (1.0 + x * (1.0 - s));
}
inline double silu_dd(double x) {
  const double s = sigmoid(x);
  return s * (1.0 - s) * (2.0 + x * (1.0 - 2.0 * s));
}

inline Tensor silu(const Tensor& a) { return map(a, [](double v) { return silu(v); }); }
inline Tensor silu_d(const Tensor& a) { return map(a, [](double v) { return silu_d(v); }); }
inline Tensor silu_dd(const Tensor& a) { return map(a, [](double v) { return silu_dd(v); }); }
inline Tensor square(const Tensor& a) { return map(a, [](double v) { return v * v; }); }

inline double sum(const Tensor& a) { return std::accumulate(a.storage().begin(), a.storage().end(), 0.0); }
inline double mean(const Tensor& a) { return sum(a) / static_cast<double>(a.size()); }

inline Tensor concat_cols(std::span<const Tensor> parts) {
  require(!parts.empty(), "concat_cols: no inputs");
  const std::size_t m = parts[0].rows();
  std::size_t n = 0;
  for (const auto& p : parts) {
    require(p.rows() == m, "concat_cols: row count mismatch");
    n += p.cols();
  }
  Tensor r({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    std::size_t off = 0;
    for (const auto& p : parts) {
      const std::size_t pc = p.cols();
      std::copy_n(p.data() + i * pc, pc, r.data() + i * n + off);
      off += pc;
    }
  }
  return r;
}
inline Tensor concat_cols(std::initializer_list<Tensor> parts) {
  return concat_cols(std::span<const Tensor>(parts.begin(), parts.size()));
}

/// Columns [c0, c1).
inline Tensor slice_cols(const Tensor& a, std::size_t c0, std::size_t c1) {
  require(c0 <= c1 && c1 <= a.cols(), "slice_cols: range out of bounds");
  const std::size_t m = a.rows(), n = a.cols(), w = c1 - c0;
  Tensor r({m, w});
  for (std::size_t i = 0; i < m; ++i) std::copy_n(a.data() + i * n + c0, w, r.data() + i * w);
  return r;
}

/// Rows [r0, r1).
inline Tensor slice_rows(const Tensor& a, std::size_t r0, std::size_t r1) {
  require(r0 <= r1 && r1 <= a.rows(), "slice_rows: range out of bounds");
  const std::size_t n = a.cols();
  return Tensor({r1 - r0, n}, std::vector<double>(a.data() + r0 * n, a.data() + r1 * n));
}

inline Tensor gather_rows(const Tensor& a, std::span<const std::size_t> idx) {
  const std::size_t n = a.cols();
  Tensor r({idx.size(), n});
  for (std::size_t i = 0; i < idx.size(); ++i) std::copy_n(a.data() + idx[i] * n, n, r.data() + i * n);
  return r;
}

inline double norm1(const Tensor& a) {
  double best = 0.0;
  for (std::size_t j = 0; j < a.cols(); ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.rows(); ++i) s += std::abs(a(i, j));
    best = std::max(best, s);
  }
  return best;
}

inline double frobenius(const Tensor& a) { return std::sqrt(sum(square(a))); }

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  require(a.size() == b.size(), "max_abs_diff: size mismatch");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline Tensor zeros_like(const Tensor& a) { return Tensor(a.shape()); }
inline Tensor constant_like(const Tensor&, Tensor value) { return value; }
inline const Tensor& value_of(const Tensor& a) { return a; }

}  // namespace kflow
