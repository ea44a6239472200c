// Copyright 2026 The blockspec Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <stdexcept>
#include <vector>

#include "blockspec/tensor.hpp"

namespace blockspec {

/// Minimal reverse-mode differentiation over matrices.
///
/// Every op appends a node holding its value and a backward closure. Nodes
/// whose inputs are all constants carry no gradient and are skipped by
/// `backward`, which is what keeps frozen parameters gradient-free when they
/// are bound as constants.
class Tape {
 public:
  struct Var {
    std::size_t id = 0;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix m) { return push(std::move(m), false, {}); }
  Var param(Matrix m) { return push(std::move(m), true, {}); }

  const Matrix& value(Var v) const { return nodes_[v.id].value; }
  bool requires_grad(Var v) const { return nodes_[v.id].req; }

  /// Gradient of the last `backward` root w.r.t. `v` (zeros if none flowed).
  Matrix grad(Var v) const {
    const Node& n = nodes_[v.id];
    return n.grad.size() ? n.grad : Matrix(n.value.rows, n.value.cols);
  }

  std::size_t size() const { return nodes_.size(); }

  Var matmul(Var a, Var b) {
    Var out = push(blockspec::matmul(value(a), value(b)), any_req({a, b}), {});
    set_backward(out, [this, a, b, out] {
      const Matrix& g = nodes_[out.id].grad;
      if (req(a)) accumulate(a, matmul_nt(g, value(b)));
      if (req(b)) accumulate(b, matmul_tn(value(a), g));
    });
    return out;
  }

  Var add(Var a, Var b) {
    if (!value(a).same_shape(value(b))) throw std::invalid_argument("Tape::add: shape mismatch");
    Matrix v = value(a);
    add_inplace(v, value(b));
    Var out = push(std::move(v), any_req({a, b}), {});
    set_backward(out, [this, a, b, out] {
      const Matrix& g = nodes_[out.id].grad;
      if (req(a)) accumulate(a, g);
      if (req(b)) accumulate(b, g);
    });
    return out;
  }

  /// x + bias, with `bias` (1 x cols) broadcast over rows.
  Var add_row(Var x, Var bias) {
    const Matrix& xv = value(x);
    const Matrix& bv = value(bias);
    if (bv.rows != 1 || bv.cols != xv.cols) throw std::invalid_argument("Tape::add_row: bias shape");
    Matrix v = xv;
    for (std::size_t i = 0; i < v.rows; ++i) {
      for (std::size_t j = 0; j < v.cols; ++j) v(i, j) += bv(0, j);
    }
    Var out = push(std::move(v), any_req({x, bias}), {});
    set_backward(out, [this, x, bias, out] {
      const Matrix& g = nodes_[out.id].grad;
      if (req(x)) accumulate(x, g);
      if (req(bias)) accumulate(bias, column_sums(g));
    });
    return out;
  }

  Var rmsnorm(Var x, Var gain, double eps) {
    const Matrix& xv = value(x);
    Var out = push(rmsnorm_rows(xv, value(gain), eps), any_req({x, gain}), {});
    set_backward(out, [this, x, gain, eps, out] {
      const Matrix& g = nodes_[out.id].grad;
      const Matrix& xv = value(x);
      const Matrix& gv = value(gain);
      const std::size_t n = xv.cols;
      Matrix dx(xv.rows, n), dg(1, n);
      for (std::size_t i = 0; i < xv.rows; ++i) {
        double ss = 0.0;
        for (std::size_t j = 0; j < n; ++j) ss += xv(i, j) * xv(i, j);
        const double inv = 1.0 / std::sqrt(ss / static_cast<double>(n) + eps);
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
          dg(0, j) += g(i, j) * xv(i, j) * inv;
          dot += g(i, j) * gv(0, j) * xv(i, j);
        }
        const double k = inv * inv * inv * dot / static_cast<double>(n);
        for (std::size_t j = 0; j < n; ++j) dx(i, j) = g(i, j) * gv(0, j) * inv - xv(i, j) * k;
      }
      if (req(x)) accumulate(x, dx);
      if (req(gain)) accumulate(gain, dg);
    });
    return out;
  }

  Var gelu(Var x) {
    Var out = push(gelu_rows(value(x)), req(x), {});
    set_backward(out, [this, x, out] {
      const Matrix& g = nodes_[out.id].grad;
      const Matrix& xv = value(x);
      Matrix dx(xv.rows, xv.cols);
      for (std::size_t i = 0; i < dx.data.size(); ++i) dx.data[i] = g.data[i] * gelu_grad(xv.data[i]);
      accumulate(x, dx);
    });
    return out;
  }

  Var rope(Var x, std::vector<std::int64_t> positions, std::size_t n_heads, double base) {
    Matrix v = value(x);
    apply_rope(v, positions, n_heads, base);
    Var out = push(std::move(v), req(x), {});
    set_backward(out, [this, x, out, positions = std::move(positions), n_heads, base] {
      Matrix dx = nodes_[out.id].grad;
      apply_rope(dx, positions, n_heads, base, -1.0);
      accumulate(x, dx);
    });
    return out;
  }

  /// See `blockspec::attention`; visible lists index rows of k and v.
  Var attention(Var q, Var k, Var v, std::vector<std::vector<std::size_t>> visible, std::size_t n_heads) {
    auto probs = std::make_shared<std::vector<std::vector<double>>>();
    Matrix o = blockspec::attention(value(q), value(k), value(v), visible, n_heads, probs.get());
    Var out = push(std::move(o), any_req({q, k, v}), {});
    set_backward(out, [this, q, k, v, out, probs, n_heads, visible = std::move(visible)] {
      const Matrix& g = nodes_[out.id].grad;
      const Matrix& qv = value(q);
      const Matrix& kv = value(k);
      const Matrix& vv = value(v);
      const std::size_t d = qv.cols;
      const std::size_t hd = d / n_heads;
      const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
      Matrix dq(qv.rows, d), dk(kv.rows, d), dv(vv.rows, d);
      std::vector<double> dp;
      for (std::size_t i = 0; i < qv.rows; ++i) {
        const auto& keys = visible[i];
        for (std::size_t h = 0; h < n_heads; ++h) {
          const auto& p = (*probs)[i * n_heads + h];
          const double* gi = g.data.data() + i * d + h * hd;
          dp.assign(keys.size(), 0.0);
          double pdp = 0.0;
          for (std::size_t n = 0; n < keys.size(); ++n) {
            const double* vj = vv.data.data() + keys[n] * d + h * hd;
            double* dvj = dv.data.data() + keys[n] * d + h * hd;
            double s = 0.0;
            for (std::size_t t = 0; t < hd; ++t) {
              s += gi[t] * vj[t];
              dvj[t] += p[n] * gi[t];
            }
            dp[n] = s;
            pdp += p[n] * s;
          }
          const double* qi = qv.data.data() + i * d + h * hd;
          double* dqi = dq.data.data() + i * d + h * hd;
          for (std::size_t n = 0; n < keys.size(); ++n) {
            const double ds = p[n] * (dp[n] - pdp) * scale;
            const double* kj = kv.data.data() + keys[n] * d + h * hd;
            double* dkj = dk.data.data() + keys[n] * d + h * hd;
            for (std::size_t t = 0; t < hd; ++t) {
              dqi[t] += ds * kj[t];
              dkj[t] += ds * qi[t];
            }
          }
        }
      }
      if (req(q)) accumulate(q, dq);
      if (req(k)) accumulate(k, dk);
      if (req(v)) accumulate(v, dv);
    });
    return out;
  }

  /// Rows idx[0], idx[1], ... of x (repeats allowed).
  Var rows(Var x, std::vector<std::size_t> idx) {
    const Matrix& xv = value(x);
    Matrix o(idx.size(), xv.cols);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      if (idx[i] >= xv.rows) throw std::invalid_argument("Tape::rows: index out of range");
      std::copy(xv.row(idx[i]).begin(), xv.row(idx[i]).end(), o.row(i).begin());
    }
    Var out = push(std::move(o), req(x), {});
    set_backward(out, [this, x, out, idx = std::move(idx)] {
      const Matrix& g = nodes_[out.id].grad;
      Matrix dx(value(x).rows, value(x).cols);
      for (std::size_t i = 0; i < idx.size(); ++i) {
        for (std::size_t j = 0; j < dx.cols; ++j) dx(idx[i], j) += g(i, j);
      }
      accumulate(x, dx);
    });
    return out;
  }

  Var concat_rows(std::vector<Var> parts) {
    std::size_t total = 0, cols = value(parts.at(0)).cols;
    bool any = false;
    for (Var p : parts) {
      if (value(p).cols != cols) throw std::invalid_argument("Tape::concat_rows: column mismatch");
      total += value(p).rows;
      any = any || req(p);
    }
    Matrix o(total, cols);
    std::size_t at = 0;
    for (Var p : parts) {
      std::copy(value(p).data.begin(), value(p).data.end(), o.data.begin() + static_cast<std::ptrdiff_t>(at * cols));
      at += value(p).rows;
    }
    Var out = push(std::move(o), any, {});
    set_backward(out, [this, out, parts = std::move(parts), cols] {
      const Matrix& g = nodes_[out.id].grad;
      std::size_t at = 0;
      for (Var p : parts) {
        const std::size_t r = value(p).rows;
        if (req(p)) {
          Matrix dp(r, cols);
          std::copy_n(g.data.begin() + static_cast<std::ptrdiff_t>(at * cols), r * cols, dp.data.begin());
          accumulate(p, dp);
        }
        at += r;
      }
    });
    return out;
  }

  /// [a | b] side by side.
  Var concat_cols(Var a, Var b) {
    const Matrix& av = value(a);
    const Matrix& bv = value(b);
    if (av.rows != bv.rows) throw std::invalid_argument("Tape::concat_cols: row mismatch");
    Matrix o(av.rows, av.cols + bv.cols);
    for (std::size_t i = 0; i < av.rows; ++i) {
      std::copy(av.row(i).begin(), av.row(i).end(), o.row(i).begin());
      std::copy(bv.row(i).begin(), bv.row(i).end(), o.row(i).begin() + static_cast<std::ptrdiff_t>(av.cols));
    }
    Var out = push(std::move(o), any_req({a, b}), {});
    set_backward(out, [this, a, b, out] {
      const Matrix& g = nodes_[out.id].grad;
      const std::size_t ca = value(a).cols, cb = value(b).cols;
      Matrix da(g.rows, ca), db(g.rows, cb);
      for (std::size_t i = 0; i < g.rows; ++i) {
        for (std::size_t j = 0; j < ca; ++j) da(i, j) = g(i, j);
        for (std::size_t j = 0; j < cb; ++j) db(i, j) = g(i, ca + j);
      }
      if (req(a)) accumulate(a, da);
      if (req(b)) accumulate(b, db);
    });
    return out;
  }

  /// Repeats a 1 x c row n times.
  Var broadcast_row(Var x, std::size_t n) {
    const Matrix& xv = value(x);
    if (xv.rows != 1) throw std::invalid_argument("Tape::broadcast_row: expects one row");
    Matrix o(n, xv.cols);
    for (std::size_t i = 0; i < n; ++i) std::copy(xv.data.begin(), xv.data.end(), o.row(i).begin());
    Var out = push(std::move(o), req(x), {});
    set_backward(out, [this, x, out] { accumulate(x, column_sums(nodes_[out.id].grad)); });
    return out;
  }

  /// sum_i weights[i] * -log softmax(logits_i)[targets[i]], as a 1 x 1 value.
  Var weighted_cross_entropy(Var logits, std::vector<int> targets, std::vector<double> weights) {
    const Matrix& lv = value(logits);
    if (targets.size() != lv.rows || weights.size() != lv.rows) {
      throw std::invalid_argument("Tape::weighted_cross_entropy: one target and weight per row");
    }
    auto probs = std::make_shared<Matrix>(lv.rows, lv.cols);
    const std::vector<std::uint8_t> all(lv.cols, 1);
    double loss = 0.0;
    for (std::size_t i = 0; i < lv.rows; ++i) {
      softmax_visible(lv.row(i), all, probs->row(i));
      loss += weights[i] * -std::log((*probs)(i, static_cast<std::size_t>(targets[i])));
    }
    Var out = push(Matrix(1, 1, loss), req(logits), {});
    set_backward(out, [this, logits, out, probs, targets = std::move(targets), weights = std::move(weights)] {
      const double g = nodes_[out.id].grad(0, 0);
      Matrix dl = *probs;
      for (std::size_t i = 0; i < dl.rows; ++i) {
        dl(i, static_cast<std::size_t>(targets[i])) -= 1.0;
        for (std::size_t j = 0; j < dl.cols; ++j) dl(i, j) *= weights[i] * g;
      }
      accumulate(logits, dl);
    });
    return out;
  }

  /// Sum of 1 x 1 values.
  Var sum(std::vector<Var> scalars) {
    double s = 0.0;
    bool any = false;
    for (Var v : scalars) {
      s += value(v)(0, 0);
      any = any || req(v);
    }
    Var out = push(Matrix(1, 1, s), any, {});
    set_backward(out, [this, out, scalars = std::move(scalars)] {
      const double g = nodes_[out.id].grad(0, 0);
      for (Var v : scalars) {
        if (req(v)) accumulate(v, Matrix(1, 1, g));
      }
    });
    return out;
  }

  /// Reverse sweep from a 1 x 1 root.
  void backward(Var root) {
    if (value(root).size() != 1) throw std::invalid_argument("Tape::backward: root must be scalar");
    for (auto& n : nodes_) n.grad = Matrix();
    if (!req(root)) return;
    nodes_[root.id].grad = Matrix(1, 1, 1.0);
    for (std::size_t id = root.id + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (n.req && n.back && n.grad.size()) n.back();
    }
    for (const auto& n : nodes_) {
      if (n.grad.size() && !all_finite(n.grad.data)) throw std::runtime_error("Tape::backward: non-finite gradient");
    }
  }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool req = false;
    std::function<void()> back;
  };

  Var push(Matrix v, bool needs_grad, std::function<void()> back) {
    nodes_.push_back(Node{std::move(v), Matrix(), needs_grad, std::move(back)});
    return Var{nodes_.size() - 1};
  }

  template <typename Fn>
  void set_backward(Var v, Fn&& fn) {
    if (nodes_[v.id].req) nodes_[v.id].back = std::forward<Fn>(fn);
  }

  bool req(Var v) const { return nodes_[v.id].req; }
  bool any_req(std::initializer_list<Var> vs) const {
    for (Var v : vs) {
      if (req(v)) return true;
    }
    return false;
  }

  void accumulate(Var v, const Matrix& g) {
    Node& n = nodes_[v.id];
    if (!n.req) return;
    if (!n.grad.size()) {
      n.grad = g;
    } else {
      add_inplace(n.grad, g);
    }
  }

  static Matrix column_sums(const Matrix& g) {
    Matrix s(1, g.cols);
    for (std::size_t i = 0; i < g.rows; ++i) {
      for (std::size_t j = 0; j < g.cols; ++j) s(0, j) += g(i, j);
    }
    return s;
  }

  std::vector<Node> nodes_;
};

}  // namespace blockspec
