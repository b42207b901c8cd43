#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "xmb/error.hpp"

namespace xmb {

// Dense row-major matrix of doubles. Vectors are 1×n rows; batches stack
// samples as rows.
struct Mat {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Mat() = default;
  Mat(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}
  Mat(std::size_t r, std::size_t c, std::vector<double> values) : rows(r), cols(c), data(std::move(values)) {
    if (data.size() != r * c) {
      throw DimensionError("matrix data length " + std::to_string(data.size()) + " != " +
                           std::to_string(r) + "x" + std::to_string(c));
    }
  }

  static Mat row(std::vector<double> values) {
    const std::size_t n = values.size();
    return Mat(1, n, std::move(values));
  }
  static Mat row(std::initializer_list<double> values) { return row(std::vector<double>(values)); }

  std::size_t size() const noexcept { return data.size(); }
  bool empty() const noexcept { return data.empty(); }
  bool same_shape(const Mat& o) const noexcept { return rows == o.rows && cols == o.cols; }

  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  double& operator[](std::size_t i) { return data[i]; }
  double operator[](std::size_t i) const { return data[i]; }

  std::span<double> row_span(std::size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const double> row_span(std::size_t r) const { return {data.data() + r * cols, cols}; }

  Mat row_copy(std::size_t r) const {
    return Mat(1, cols, std::vector<double>(data.begin() + r * cols, data.begin() + (r + 1) * cols));
  }

  bool all_finite() const noexcept {
    for (double v : data) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  std::string shape_str() const { return std::to_string(rows) + "x" + std::to_string(cols); }

  friend bool operator==(const Mat& a, const Mat& b) {
    return a.rows == b.rows && a.cols == b.cols && a.data == b.data;
  }
};

// Stacks 1×n rows (or any equal-width matrices) vertically.
inline Mat vstack(const std::vector<Mat>& parts) {
  if (parts.empty()) return {};
  const std::size_t cols = parts.front().cols;
  std::size_t rows = 0;
  for (const auto& p : parts) {
    if (p.cols != cols) throw DimensionError("vstack width mismatch");
    rows += p.rows;
  }
  Mat out(rows, cols);
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::copy(p.data.begin(), p.data.end(), out.data.begin() + off);
    off += p.data.size();
  }
  return out;
}

namespace la {

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

inline double cosine(std::span<const double> a, std::span<const double> b, double floor = 1e-12) {
  const double d = std::max(norm(a) * norm(b), floor);
  return dot(a, b) / d;
}

inline double dist(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

inline double max_abs_diff(const Mat& a, const Mat& b) {
  if (!a.same_shape(b)) throw DimensionError("max_abs_diff shape mismatch");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// out = X · Wᵀ, X: B×in, W: out×in.
inline Mat matmul_nt(const Mat& x, const Mat& w) {
  if (x.cols != w.cols) throw DimensionError("matmul_nt " + x.shape_str() + " * (" + w.shape_str() + ")^T");
  Mat out(x.rows, w.rows);
  for (std::size_t b = 0; b < x.rows; ++b) {
    const double* xr = x.data.data() + b * x.cols;
    double* orow = out.data.data() + b * w.rows;
    for (std::size_t o = 0; o < w.rows; ++o) {
      const double* wr = w.data.data() + o * w.cols;
      double s = 0.0;
      for (std::size_t i = 0; i < x.cols; ++i) s += xr[i] * wr[i];
      orow[o] = s;
    }
  }
  return out;
}

// acc += G · W, G: B×out, W: out×in.
inline void add_matmul_nn(const Mat& g, const Mat& w, Mat& acc) {
  for (std::size_t b = 0; b < g.rows; ++b) {
    double* ar = acc.data.data() + b * acc.cols;
    const double* gr = g.data.data() + b * g.cols;
    for (std::size_t o = 0; o < g.cols; ++o) {
      const double go = gr[o];
      if (go == 0.0) continue;
      const double* wr = w.data.data() + o * w.cols;
      for (std::size_t i = 0; i < w.cols; ++i) ar[i] += go * wr[i];
    }
  }
}

// acc += Gᵀ · X, G: B×out, X: B×in, acc: out×in.
inline void add_matmul_tn(const Mat& g, const Mat& x, Mat& acc) {
  for (std::size_t b = 0; b < g.rows; ++b) {
    const double* gr = g.data.data() + b * g.cols;
    const double* xr = x.data.data() + b * x.cols;
    for (std::size_t o = 0; o < g.cols; ++o) {
      const double go = gr[o];
      if (go == 0.0) continue;
      double* ar = acc.data.data() + o * acc.cols;
      for (std::size_t i = 0; i < x.cols; ++i) ar[i] += go * xr[i];
    }
  }
}

inline Mat transpose(const Mat& a) {
  Mat t(a.cols, a.rows);
  for (std::size_t r = 0; r < a.rows; ++r)
    for (std::size_t c = 0; c < a.cols; ++c) t(c, r) = a(r, c);
  return t;
}

}  // namespace la
}  // namespace xmb
