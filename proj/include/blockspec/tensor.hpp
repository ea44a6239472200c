// Copyright 2026 The blockspec Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace blockspec {

/// Dense row-major matrix of IEEE-754 doubles.
///
/// Vectors are represented as 1 x n matrices so that every parameter tensor
/// in the project shares one type.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}
  Matrix(std::size_t r, std::size_t c, std::vector<double> values)
      : rows(r), cols(c), data(std::move(values)) {
    if (data.size() != rows * cols) {
      throw std::invalid_argument("Matrix: data length " + std::to_string(data.size()) +
                                  " != " + std::to_string(rows) + "x" + std::to_string(cols));
    }
  }

  static Matrix from_rows(std::initializer_list<std::initializer_list<double>> init) {
    Matrix m;
    m.rows = init.size();
    m.cols = m.rows ? init.begin()->size() : 0;
    m.data.reserve(m.rows * m.cols);
    for (const auto& r : init) {
      if (r.size() != m.cols) throw std::invalid_argument("Matrix::from_rows: ragged rows");
      m.data.insert(m.data.end(), r.begin(), r.end());
    }
    return m;
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

  std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

  std::size_t size() const { return data.size(); }
  bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }

  friend bool operator==(const Matrix&, const Matrix&) = default;
};

inline bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

inline void require_finite(const Matrix& m, const char* what) {
  if (!all_finite(m.data)) throw std::runtime_error(std::string(what) + ": non-finite value");
}

/// Standard product. Accumulates over the shared dimension left to right so
/// each output row depends only on the matching row of `a`, bit for bit.
inline Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols != b.rows) {
    throw std::invalid_argument("matmul: dimension mismatch " + std::to_string(a.rows) + "x" +
                                std::to_string(a.cols) + " * " + std::to_string(b.rows) + "x" +
                                std::to_string(b.cols));
  }
  Matrix out(a.rows, b.cols);
  for (std::size_t i = 0; i < a.rows; ++i) {
    double* o = out.data.data() + i * out.cols;
    for (std::size_t k = 0; k < a.cols; ++k) {
      const double aik = a(i, k);
      const double* brow = b.data.data() + k * b.cols;
      for (std::size_t j = 0; j < b.cols; ++j) o[j] += aik * brow[j];
    }
  }
  require_finite(out, "matmul");
  return out;
}

/// a^T * b without materializing the transpose.
inline Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  if (a.rows != b.rows) throw std::invalid_argument("matmul_tn: dimension mismatch");
  Matrix out(a.cols, b.cols);
  for (std::size_t k = 0; k < a.rows; ++k) {
    const double* arow = a.data.data() + k * a.cols;
    const double* brow = b.data.data() + k * b.cols;
    for (std::size_t i = 0; i < a.cols; ++i) {
      const double aki = arow[i];
      double* o = out.data.data() + i * out.cols;
      for (std::size_t j = 0; j < b.cols; ++j) o[j] += aki * brow[j];
    }
  }
  return out;
}

/// a * b^T without materializing the transpose.
inline Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  if (a.cols != b.cols) throw std::invalid_argument("matmul_nt: dimension mismatch");
  Matrix out(a.rows, b.rows);
  for (std::size_t i = 0; i < a.rows; ++i) {
    const double* arow = a.data.data() + i * a.cols;
    for (std::size_t j = 0; j < b.rows; ++j) {
      const double* brow = b.data.data() + j * b.cols;
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols; ++k) s += arow[k] * brow[k];
      out(i, j) = s;
    }
  }
  return out;
}

inline void add_inplace(Matrix& a, const Matrix& b) {
  if (!a.same_shape(b)) throw std::invalid_argument("add_inplace: shape mismatch");
  for (std::size_t i = 0; i < a.data.size(); ++i) a.data[i] += b.data[i];
}

/// Softmax over the entries of `scores` whose `visible` flag is set. Hidden
/// entries come out as exactly 0 and are skipped (not added as zeros), so the
/// result for the visible entries does not depend on how many hidden ones
/// surround them.
inline void softmax_visible(std::span<const double> scores, std::span<const std::uint8_t> visible,
                            std::span<double> out) {
  double max_v = -INFINITY;
  bool any = false;
  for (std::size_t j = 0; j < scores.size(); ++j) {
    if (visible[j]) {
      max_v = any ? std::max(max_v, scores[j]) : scores[j];
      any = true;
    }
  }
  if (!any) throw std::invalid_argument("masked softmax: fully masked row");
  double sum = 0.0;
  for (std::size_t j = 0; j < scores.size(); ++j) {
    if (visible[j]) {
      out[j] = std::exp(scores[j] - max_v);
      sum += out[j];
    } else {
      out[j] = 0.0;
    }
  }
  for (std::size_t j = 0; j < scores.size(); ++j) {
    if (visible[j]) out[j] /= sum;
  }
}

/// `visible` is row-major with the same shape as `scores` (nonzero = visible).
inline Matrix masked_softmax_rows(const Matrix& scores, std::span<const std::uint8_t> visible) {
  if (visible.size() != scores.size()) throw std::invalid_argument("masked_softmax_rows: mask shape");
  Matrix out(scores.rows, scores.cols);
  for (std::size_t i = 0; i < scores.rows; ++i) {
    softmax_visible(scores.row(i), visible.subspan(i * scores.cols, scores.cols), out.row(i));
  }
  require_finite(out, "masked_softmax_rows");
  return out;
}

/// x / sqrt(mean(x^2) + eps) * gain.
inline std::vector<double> rmsnorm(std::span<const double> row, std::span<const double> gain,
                                   double eps) {
  if (row.size() != gain.size()) throw std::invalid_argument("rmsnorm: length mismatch");
  double ss = 0.0;
  for (double x : row) ss += x * x;
  const double inv = 1.0 / std::sqrt(ss / static_cast<double>(row.size()) + eps);
  std::vector<double> out(row.size());
  for (std::size_t i = 0; i < row.size(); ++i) out[i] = row[i] * inv * gain[i];
  return out;
}

inline Matrix rmsnorm_rows(const Matrix& x, const Matrix& gain, double eps) {
  Matrix out(x.rows, x.cols);
  for (std::size_t i = 0; i < x.rows; ++i) {
    auto r = rmsnorm(x.row(i), gain.data, eps);
    std::copy(r.begin(), r.end(), out.row(i).begin());
  }
  return out;
}

// GELU, tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
inline constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
inline constexpr double kGeluA = 0.044715;

inline double gelu(double x) {
  return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluA * x * x * x)));
}

inline double gelu_grad(double x) {
  const double u = kGeluC * (x + kGeluA * x * x * x);
  const double t = std::tanh(u);
  const double du = kGeluC * (1.0 + 3.0 * kGeluA * x * x);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}

inline Matrix gelu_rows(const Matrix& x) {
  Matrix out = x;
  for (double& v : out.data) v = gelu(v);
  return out;
}

/// Rotary embedding applied in place, per head, on consecutive pairs
/// (2i, 2i+1) with angle pos * base^(-2i/head_dim). `sign` = -1 applies the
/// inverse rotation (used by backprop).
inline void apply_rope(Matrix& x, std::span<const std::int64_t> positions, std::size_t n_heads,
                       double base, double sign = 1.0) {
  if (positions.size() != x.rows) throw std::invalid_argument("rope: positions/rows mismatch");
  const std::size_t hd = x.cols / n_heads;
  for (std::size_t r = 0; r < x.rows; ++r) {
    const double pos = static_cast<double>(positions[r]);
    for (std::size_t h = 0; h < n_heads; ++h) {
      double* v = x.data.data() + r * x.cols + h * hd;
      for (std::size_t i = 0; i + 1 < hd; i += 2) {
        const double theta = pos * std::pow(base, -static_cast<double>(i) / static_cast<double>(hd));
        const double c = std::cos(theta);
        const double s = sign * std::sin(theta);
        const double a = v[i];
        const double b = v[i + 1];
        v[i] = a * c - b * s;
        v[i + 1] = a * s + b * c;
      }
    }
  }
}

/// Multi-head attention where each query row attends to an explicit, ordered
/// list of key rows. Scores are reduced in list order, so two queries with the
/// same key list produce bitwise identical outputs.
///
/// If `probs` is non-null it receives, per (query, head), the softmax weights
/// aligned with `visible[query]`.
inline Matrix attention(const Matrix& q, const Matrix& k, const Matrix& v,
                        const std::vector<std::vector<std::size_t>>& visible, std::size_t n_heads,
                        std::vector<std::vector<double>>* probs = nullptr) {
  if (q.cols != k.cols || k.rows != v.rows || k.cols != v.cols || visible.size() != q.rows) {
    throw std::invalid_argument("attention: shape mismatch");
  }
  const std::size_t d = q.cols;
  const std::size_t hd = d / n_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  Matrix out(q.rows, d);
  if (probs) probs->assign(q.rows * n_heads, {});
  std::vector<double> scores;
  std::vector<std::uint8_t> ones;
  for (std::size_t i = 0; i < q.rows; ++i) {
    const auto& keys = visible[i];
    if (keys.empty()) throw std::invalid_argument("attention: query row sees nothing");
    scores.resize(keys.size());
    ones.assign(keys.size(), 1);
    for (std::size_t h = 0; h < n_heads; ++h) {
      const double* qi = q.data.data() + i * d + h * hd;
      for (std::size_t n = 0; n < keys.size(); ++n) {
        const double* kj = k.data.data() + keys[n] * d + h * hd;
        double s = 0.0;
        for (std::size_t t = 0; t < hd; ++t) s += qi[t] * kj[t];
        scores[n] = s * scale;
      }
      softmax_visible(scores, ones, scores);
      double* oi = out.data.data() + i * d + h * hd;
      for (std::size_t n = 0; n < keys.size(); ++n) {
        const double p = scores[n];
        const double* vj = v.data.data() + keys[n] * d + h * hd;
        for (std::size_t t = 0; t < hd; ++t) oi[t] += p * vj[t];
      }
      if (probs) (*probs)[i * n_heads + h] = scores;
    }
  }
  return out;
}

/// Smallest index attaining the maximum.
inline std::size_t argmax_tiebreak_low(std::span<const double> v) {
  if (v.empty()) throw std::invalid_argument("argmax: empty input");
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (v[i] > v[best]) best = i;
  }
  return best;
}

}  // namespace blockspec
