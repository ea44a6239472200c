// Copyright 2026 The blockspec Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <cstring>
#include <numbers>
#include <random>
#include <span>
#include <vector>

#include "blockspec/layout.hpp"
#include "blockspec/model.hpp"

namespace blockspec::testing {

inline ModelConfig tiny_config(int layers = 2, int draft_layers = 1, int vocab = 11, int slots = 3) {
  ModelConfig c;
  c.n_layers = layers;
  c.n_draft_layers = draft_layers;
  c.d_model = 8;
  c.n_heads = 2;
  c.d_ff = 12;
  c.vocab_size = vocab;
  c.block_slots = slots;
  c.calib_hidden = 6;
  return c;
}

inline Model random_model(const ModelConfig& cfg, std::uint64_t seed, double head_scale = 1.0) {
  Model m;
  m.config = cfg;
  m.frozen = init_frozen(cfg, seed, head_scale);
  m.draft = init_random_draft(cfg, seed + 1000);
  return m;
}

/// Target whose logits are identically zero (greedy always emits token 0) with
/// a drafter initialised from it, so every greedy draft is accepted.
inline Model perfect_drafter_model(const ModelConfig& cfg, std::uint64_t seed) {
  Model m;
  m.config = cfg;
  m.frozen = init_frozen(cfg, seed);
  for (double& g : m.frozen.final_gain.data) g = 0.0;
  m.draft = init_draft(cfg, m.frozen, seed + 1);
  return m;
}

/// Same target, but calibration pushes every calibrated draft to token 1, which
/// the target never emits.
inline Model never_matching_model(const ModelConfig& cfg, std::uint64_t seed) {
  Model m = perfect_drafter_model(cfg, seed);
  m.draft.calib.b2(0, 1) = 1e3;
  return m;
}

inline std::vector<int> random_tokens(std::size_t n, int vocab, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> d(0, vocab - 1);
  std::vector<int> t(n);
  for (int& x : t) x = d(rng);
  return t;
}

inline Matrix random_matrix(std::size_t r, std::size_t c, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> d(0.0, scale);
  Matrix m(r, c);
  for (double& x : m.data) x = d(rng);
  return m;
}

inline double max_abs_diff(const Matrix& a, const Matrix& b) {
  double w = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i) w = std::max(w, std::abs(a.data[i] - b.data[i]));
  return w;
}

inline bool bitwise_equal(std::span<const double> a, std::span<const double> b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

/// Straight-line transformer written directly from the equations, one row and
/// one head at a time. Supports any cache-free layout: mask rows join at the
/// first draft layer with the mask embedding and use the drafter projectors.
/// Returns final-norm hidden states (rows x d) in layout order.
struct Reference {
  const Model& m;

  static std::vector<double> vecmat(const std::vector<double>& x, const Matrix& w) {
    std::vector<double> y(w.cols, 0.0);
    for (std::size_t j = 0; j < w.cols; ++j) {
      double s = 0.0;
      for (std::size_t i = 0; i < w.rows; ++i) s += x[i] * w(i, j);
      y[j] = s;
    }
    return y;
  }

  std::vector<double> norm(const std::vector<double>& x, const Matrix& g) const {
    double ms = 0.0;
    for (double v : x) ms += v * v / static_cast<double>(x.size());
    std::vector<double> y(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] / std::sqrt(ms + m.config.norm_eps) * g.data[i];
    return y;
  }

  std::vector<double> rotate(std::vector<double> x, std::int64_t pos) const {
    const std::size_t hd = static_cast<std::size_t>(m.config.head_dim());
    for (std::size_t h = 0; h < static_cast<std::size_t>(m.config.n_heads); ++h) {
      for (std::size_t i = 0; i < hd / 2; ++i) {
        const double freq = std::pow(m.config.rope_base, -2.0 * static_cast<double>(i) / static_cast<double>(hd));
        const std::complex<double> z(x[h * hd + 2 * i], x[h * hd + 2 * i + 1]);
        const std::complex<double> r = z * std::polar(1.0, static_cast<double>(pos) * freq);
        x[h * hd + 2 * i] = r.real();
        x[h * hd + 2 * i + 1] = r.imag();
      }
    }
    return x;
  }

  static double gelu(double x) {
    return 0.5 * x * (1.0 + std::tanh(std::sqrt(2.0 / std::numbers::pi) * (x + 0.044715 * std::pow(x, 3))));
  }

  std::vector<std::vector<double>> hidden(const AttentionLayout& lay, const std::vector<int>& tokens) const {
    const ModelConfig& c = m.config;
    const std::size_t n = lay.size(), d = static_cast<std::size_t>(c.d_model);
    const std::size_t hd = static_cast<std::size_t>(c.head_dim());
    const int first = c.first_draft_layer();
    std::vector<std::vector<double>> x(n);
    std::size_t t = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (!lay.is_mask(i)) {
        const auto e = m.frozen.embed.row(static_cast<std::size_t>(tokens[t++]));
        x[i].assign(e.begin(), e.end());
      }
    }
    for (int l = 0; l < c.n_layers; ++l) {
      const FrozenLayer& fl = m.frozen.layers[static_cast<std::size_t>(l)];
      if (l == first) {
        for (std::size_t i = 0; i < n; ++i) {
          if (lay.is_mask(i)) x[i] = m.draft.mask_embed.data;
        }
      }
      auto active = [&](std::size_t i) { return !lay.is_mask(i) || l >= first; };
      auto proj = [&](std::size_t i) -> const AttentionProjectors& {
        return lay.is_mask(i) ? m.draft.layers[static_cast<std::size_t>(l - first)] : fl.attn;
      };
      std::vector<std::vector<double>> q(n), k(n), v(n);
      for (std::size_t i = 0; i < n; ++i) {
        if (!active(i)) continue;
        const auto a = norm(x[i], fl.attn_gain);
        q[i] = rotate(vecmat(a, proj(i).wq), lay.row(i).position);
        k[i] = rotate(vecmat(a, proj(i).wk), lay.row(i).position);
        v[i] = vecmat(a, proj(i).wv);
      }
      std::vector<std::vector<double>> next = x;
      for (std::size_t i = 0; i < n; ++i) {
        if (!active(i)) continue;
        std::vector<double> att(d, 0.0);
        for (std::size_t h = 0; h < static_cast<std::size_t>(c.n_heads); ++h) {
          std::vector<double> s(n, 0.0);
          double mx = -1e300;
          for (std::size_t j = 0; j < n; ++j) {
            if (!lay.sees_row(i, j)) continue;
            double dot = 0.0;
            for (std::size_t u = 0; u < hd; ++u) dot += q[i][h * hd + u] * k[j][h * hd + u];
            s[j] = dot / std::sqrt(static_cast<double>(hd));
            mx = std::max(mx, s[j]);
          }
          double z = 0.0;
          for (std::size_t j = 0; j < n; ++j) {
            if (lay.sees_row(i, j)) z += std::exp(s[j] - mx);
          }
          for (std::size_t j = 0; j < n; ++j) {
            if (!lay.sees_row(i, j)) continue;
            const double p = std::exp(s[j] - mx) / z;
            for (std::size_t u = 0; u < hd; ++u) att[h * hd + u] += p * v[j][h * hd + u];
          }
        }
        const auto o = vecmat(att, proj(i).wo);
        for (std::size_t u = 0; u < d; ++u) next[i][u] += o[u];
        const auto f = norm(next[i], fl.ffn_gain);
        auto hmid = vecmat(f, fl.w1);
        for (double& y : hmid) y = gelu(y);
        const auto ff = vecmat(hmid, fl.w2);
        for (std::size_t u = 0; u < d; ++u) next[i][u] += ff[u];
      }
      x = std::move(next);
    }
    for (auto& r : x) r = norm(r, m.frozen.final_gain);
    return x;
  }

  std::vector<std::vector<double>> logits(const AttentionLayout& lay, const std::vector<int>& tokens) const {
    auto h = hidden(lay, tokens);
    for (auto& r : h) r = vecmat(r, m.frozen.head);
    return h;
  }
};

}  // namespace blockspec::testing
