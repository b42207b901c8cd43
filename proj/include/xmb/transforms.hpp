#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <string>

#include "xmb/error.hpp"
#include "xmb/mat.hpp"
#include "xmb/tape.hpp"
#include "xmb/world.hpp"

namespace xmb {

// Input-side sanitization. `lowpass` is the vector analog of JPEG: an
// orthonormal DCT-II with the trailing coefficients dropped.
struct Transform {
  enum class Kind { Identity, Smooth, Quantize, Lowpass };
  Kind kind = Kind::Identity;
  double sigma = 1.0;      // smooth
  int bits = 8;            // quantize
  double keep_frac = 1.0;  // lowpass

  static Transform identity() { return {}; }
  static Transform smooth(double sigma) { return {Kind::Smooth, sigma, 8, 1.0}; }
  static Transform quantize(int bits) { return {Kind::Quantize, 1.0, bits, 1.0}; }
  static Transform lowpass(double keep_frac) { return {Kind::Lowpass, 1.0, 8, keep_frac}; }

  void validate() const {
    if (kind == Kind::Smooth && !(sigma > 0.0)) throw ConfigError("smooth sigma must be > 0");
    if (kind == Kind::Quantize && (bits < 1 || bits > 8)) throw ConfigError("quantize bits must be in [1, 8]");
    if (kind == Kind::Lowpass && !(keep_frac > 0.0 && keep_frac <= 1.0))
      throw ConfigError("lowpass keep_frac must be in (0, 1]");
  }

  bool is_linear() const { return kind != Kind::Quantize; }

  std::string name() const {
    switch (kind) {
      case Kind::Identity: return "identity";
      case Kind::Smooth: return "smooth";
      case Kind::Quantize: return "quantize";
      case Kind::Lowpass: return "lowpass";
    }
    return "?";
  }

  std::string setting() const {
    char buf[32];
    switch (kind) {
      case Kind::Identity: return "-";
      case Kind::Smooth: std::snprintf(buf, sizeof buf, "sigma=%g", sigma); return buf;
      case Kind::Quantize: std::snprintf(buf, sizeof buf, "%d-bit", bits); return buf;
      case Kind::Lowpass: std::snprintf(buf, sizeof buf, "keep=%g", keep_frac); return buf;
    }
    return "?";
  }

  // Parses "identity", "smooth:1.0", "quantize:4", "lowpass:0.5".
  static Transform parse(const std::string& spec) {
    const auto colon = spec.find(':');
    const std::string kind = spec.substr(0, colon);
    const std::string arg = colon == std::string::npos ? "" : spec.substr(colon + 1);
    Transform t;
    try {
      if (kind == "identity") {
        t = identity();
      } else if (kind == "smooth") {
        t = smooth(std::stod(arg));
      } else if (kind == "quantize") {
        t = quantize(std::stoi(arg));
      } else if (kind == "lowpass") {
        t = lowpass(std::stod(arg));
      } else {
        throw ConfigError("unknown transform '" + spec + "'");
      }
    } catch (const std::logic_error&) {
      throw ConfigError("bad transform argument in '" + spec + "'");
    }
    t.validate();
    return t;
  }
};

// Row-stochastic n×n Gaussian smoothing matrix, radius ⌈3σ⌉, each row
// renormalized over the taps that fall inside the vector.
inline Mat smoothing_matrix(std::size_t n, double sigma) {
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  Mat s(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    double total = 0.0;
    for (int k = -radius; k <= radius; ++k) {
      const long j = static_cast<long>(i) + k;
      if (j < 0 || j >= static_cast<long>(n)) continue;
      const double w = std::exp(-0.5 * k * k / (sigma * sigma));
      s(i, static_cast<std::size_t>(j)) = w;
      total += w;
    }
    for (std::size_t j = 0; j < n; ++j) s(i, j) /= total;
  }
  return s;
}

// Orthonormal DCT-II: coefficients = D · x.
inline Mat dct_matrix(std::size_t n) {
  Mat d(n, n);
  const double nn = static_cast<double>(n);
  for (std::size_t k = 0; k < n; ++k) {
    const double a = k == 0 ? std::sqrt(1.0 / nn) : std::sqrt(2.0 / nn);
    for (std::size_t i = 0; i < n; ++i)
      d(k, i) = a * std::cos(std::numbers::pi * (static_cast<double>(i) + 0.5) * static_cast<double>(k) / nn);
  }
  return d;
}

inline std::size_t lowpass_kept(std::size_t n, double keep_frac) {
  return std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(keep_frac * static_cast<double>(n))), 1, n);
}

// Dᵀ · diag(mask) · D, keeping the leading coefficients.
inline Mat lowpass_matrix(std::size_t n, double keep_frac) {
  const Mat d = dct_matrix(n);
  const std::size_t keep = lowpass_kept(n, keep_frac);
  Mat out(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < keep; ++k) s += d(k, i) * d(k, j);
      out(i, j) = s;
    }
  return out;
}

inline Mat quantize_rows(const Mat& x, int bits, Modality m) {
  const double levels = std::ldexp(1.0, bits) - 1.0;
  Mat out = x;
  for (std::size_t r = 0; r < x.rows; ++r) {
    auto row = out.row_span(r);
    if (m == Modality::Image) {
      for (double& v : row) v = std::round(std::clamp(v, 0.0, 1.0) * levels) / levels;
    } else {
      const auto [mn, mx] = std::minmax_element(row.begin(), row.end());
      const double lo = *mn, hi = *mx;
      if (hi - lo <= 0.0) continue;
      for (double& v : row) v = lo + std::round((v - lo) / (hi - lo) * levels) / levels * (hi - lo);
    }
  }
  return out;
}

// A transform prepared for one input width: linear kinds carry their matrix.
class PreparedTransform {
 public:
  PreparedTransform(const Transform& t, std::size_t dim, Modality m) : t_(t), dim_(dim), modality_(m) {
    t_.validate();
    if (t_.kind == Transform::Kind::Smooth) map_ = smoothing_matrix(dim, t_.sigma);
    if (t_.kind == Transform::Kind::Lowpass) map_ = lowpass_matrix(dim, t_.keep_frac);
  }

  const Transform& transform() const { return t_; }
  const Mat& linear_map() const { return map_; }

  // Exact transform applied row-wise to a batch.
  Mat apply(const Mat& x) const {
    if (x.cols != dim_) throw DimensionError("transform width " + std::to_string(x.cols) + " != " + std::to_string(dim_));
    switch (t_.kind) {
      case Transform::Kind::Identity: return x;
      case Transform::Kind::Quantize: return quantize_rows(x, t_.bits, modality_);
      case Transform::Kind::Smooth:
      case Transform::Kind::Lowpass: return la::matmul_nt(x, map_);
    }
    return x;
  }

  // Differentiable surrogate: linear kinds are exact (gradient is the map's
  // transpose); quantization is straight-through.
  Var surrogate(Var x) const {
    switch (t_.kind) {
      case Transform::Kind::Identity: return x;
      case Transform::Kind::Quantize: return straight_through(x, apply(x.value()));
      case Transform::Kind::Smooth:
      case Transform::Kind::Lowpass: return linear(x, x.tape->constant(map_));
    }
    return x;
  }

 private:
  Transform t_;
  std::size_t dim_;
  Modality modality_;
  Mat map_;
};

inline Mat apply_transform(const Mat& x, const Transform& t, Modality m) {
  return PreparedTransform(t, x.cols, m).apply(x);
}

}  // namespace xmb
