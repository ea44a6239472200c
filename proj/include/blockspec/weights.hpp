// Copyright 2026 The blockspec Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "blockspec/config.hpp"
#include "blockspec/tensor.hpp"

namespace blockspec {

struct AttentionProjectors {
  Matrix wq, wk, wv, wo;  // d x d each

  template <typename Self, typename Fn>
  static void visit(Self& self, const std::string& prefix, Fn&& fn) {
    fn(prefix + "wq", self.wq);
    fn(prefix + "wk", self.wk);
    fn(prefix + "wv", self.wv);
    fn(prefix + "wo", self.wo);
  }

  friend bool operator==(const AttentionProjectors&, const AttentionProjectors&) = default;
};

struct FrozenLayer {
  AttentionProjectors attn;
  Matrix attn_gain;  // 1 x d
  Matrix ffn_gain;   // 1 x d
  Matrix w1;         // d x d_ff
  Matrix w2;         // d_ff x d

  friend bool operator==(const FrozenLayer&, const FrozenLayer&) = default;
};

/// Parameters of the target model. Never written by the drafter trainer.
struct FrozenWeights {
  Matrix embed;  // |V| x d
  std::vector<FrozenLayer> layers;
  Matrix final_gain;  // 1 x d
  Matrix head;        // d x |V|, untied from embed

  template <typename Self, typename Fn>
  static void visit(Self& self, Fn&& fn) {
    fn(std::string("embed"), self.embed);
    for (std::size_t l = 0; l < self.layers.size(); ++l) {
      auto& layer = self.layers[l];
      const std::string p = "layers." + std::to_string(l) + ".";
      AttentionProjectors::visit(layer.attn, p, fn);
      fn(p + "attn_gain", layer.attn_gain);
      fn(p + "ffn_gain", layer.ffn_gain);
      fn(p + "w1", layer.w1);
      fn(p + "w2", layer.w2);
    }
    fn(std::string("final_gain"), self.final_gain);
    fn(std::string("head"), self.head);
  }
  template <typename Fn> void for_each(Fn&& fn) { visit(*this, fn); }
  template <typename Fn> void for_each(Fn&& fn) const { visit(*this, fn); }

  friend bool operator==(const FrozenWeights&, const FrozenWeights&) = default;
};

/// Bonus-conditioned logit bias: U2 * gelu(U1 * [e_b; h] + b1) + b2.
struct CalibrationMlp {
  Matrix u1;  // 2d x d_c
  Matrix b1;  // 1 x d_c
  Matrix u2;  // d_c x |V|
  Matrix b2;  // 1 x |V|

  friend bool operator==(const CalibrationMlp&, const CalibrationMlp&) = default;
};

/// Everything the drafter trains: mask-route attention projectors for the last
/// N layers, the shared mask embedding, and the calibration MLP.
struct DraftWeights {
  std::vector<AttentionProjectors> layers;  // index 0 is layer L-N
  Matrix mask_embed;                        // 1 x d
  CalibrationMlp calib;

  template <typename Self, typename Fn>
  static void visit(Self& self, Fn&& fn) {
    for (std::size_t l = 0; l < self.layers.size(); ++l) {
      AttentionProjectors::visit(self.layers[l], "draft.layers." + std::to_string(l) + ".", fn);
    }
    fn(std::string("draft.mask_embed"), self.mask_embed);
    fn(std::string("calib.u1"), self.calib.u1);
    fn(std::string("calib.b1"), self.calib.b1);
    fn(std::string("calib.u2"), self.calib.u2);
    fn(std::string("calib.b2"), self.calib.b2);
  }
  template <typename Fn> void for_each(Fn&& fn) { visit(*this, fn); }
  template <typename Fn> void for_each(Fn&& fn) const { visit(*this, fn); }

  /// Same shapes, all zeros. Used for gradient and optimizer-moment buffers.
  DraftWeights zeros_like() const {
    DraftWeights z = *this;
    z.for_each([](const std::string&, Matrix& m) { std::fill(m.data.begin(), m.data.end(), 0.0); });
    return z;
  }

  friend bool operator==(const DraftWeights&, const DraftWeights&) = default;
};

template <typename W>
std::size_t parameter_count(const W& w) {
  std::size_t n = 0;
  w.for_each([&](const std::string&, const Matrix& m) { n += m.size(); });
  return n;
}

namespace detail {
inline Matrix gaussian(std::size_t r, std::size_t c, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Matrix m(r, c);
  for (double& v : m.data) v = dist(rng);
  return m;
}
}  // namespace detail

/// Random target. `head_scale` multiplies the LM head init; larger values give
/// sharper next-token distributions.
inline FrozenWeights init_frozen(const ModelConfig& cfg, std::uint64_t seed, double head_scale = 1.0) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  const auto d = static_cast<std::size_t>(cfg.d_model);
  const auto ff = static_cast<std::size_t>(cfg.d_ff);
  const auto vocab = static_cast<std::size_t>(cfg.vocab_size);
  const double sd = 1.0 / std::sqrt(static_cast<double>(d));
  FrozenWeights w;
  w.embed = detail::gaussian(vocab, d, 1.0, rng);
  for (int l = 0; l < cfg.n_layers; ++l) {
    FrozenLayer layer;
    layer.attn.wq = detail::gaussian(d, d, sd, rng);
    layer.attn.wk = detail::gaussian(d, d, sd, rng);
    layer.attn.wv = detail::gaussian(d, d, sd, rng);
    layer.attn.wo = detail::gaussian(d, d, sd, rng);
    layer.attn_gain = Matrix(1, d, 1.0);
    layer.ffn_gain = Matrix(1, d, 1.0);
    layer.w1 = detail::gaussian(d, ff, sd, rng);
    layer.w2 = detail::gaussian(ff, d, 1.0 / std::sqrt(static_cast<double>(ff)), rng);
    w.layers.push_back(std::move(layer));
  }
  w.final_gain = Matrix(1, d, 1.0);
  w.head = detail::gaussian(d, vocab, head_scale * sd, rng);
  return w;
}

/// Training-start drafter: mask projectors copy the frozen ones, the mask
/// embedding is the mean token embedding, and the calibration output layer is
/// zero so calibration starts as an exact no-op.
inline DraftWeights init_draft(const ModelConfig& cfg, const FrozenWeights& frozen, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  const auto d = static_cast<std::size_t>(cfg.d_model);
  const auto dc = static_cast<std::size_t>(cfg.calib_hidden);
  const auto vocab = static_cast<std::size_t>(cfg.vocab_size);
  DraftWeights w;
  for (int l = cfg.first_draft_layer(); l < cfg.n_layers; ++l) {
    w.layers.push_back(frozen.layers[static_cast<std::size_t>(l)].attn);
  }
  w.mask_embed = Matrix(1, d);
  for (std::size_t t = 0; t < frozen.embed.rows; ++t) {
    for (std::size_t j = 0; j < d; ++j) w.mask_embed(0, j) += frozen.embed(t, j);
  }
  for (double& v : w.mask_embed.data) v /= static_cast<double>(frozen.embed.rows);
  w.calib.u1 = detail::gaussian(2 * d, dc, 1.0 / std::sqrt(static_cast<double>(2 * d)), rng);
  w.calib.b1 = Matrix(1, dc);
  w.calib.u2 = Matrix(dc, vocab);
  w.calib.b2 = Matrix(1, vocab);
  return w;
}

/// Fully random drafter (nonzero calibration output layer). The verification
/// rule must stay lossless for any drafter, so tests use this heavily.
inline DraftWeights init_random_draft(const ModelConfig& cfg, std::uint64_t seed, double scale = 1.0) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  const auto d = static_cast<std::size_t>(cfg.d_model);
  const auto dc = static_cast<std::size_t>(cfg.calib_hidden);
  const auto vocab = static_cast<std::size_t>(cfg.vocab_size);
  const double sd = scale / std::sqrt(static_cast<double>(d));
  DraftWeights w;
  for (int l = 0; l < cfg.n_draft_layers; ++l) {
    AttentionProjectors p;
    p.wq = detail::gaussian(d, d, sd, rng);
    p.wk = detail::gaussian(d, d, sd, rng);
    p.wv = detail::gaussian(d, d, sd, rng);
    p.wo = detail::gaussian(d, d, sd, rng);
    w.layers.push_back(std::move(p));
  }
  w.mask_embed = detail::gaussian(1, d, scale, rng);
  w.calib.u1 = detail::gaussian(2 * d, dc, scale / std::sqrt(static_cast<double>(2 * d)), rng);
  w.calib.b1 = detail::gaussian(1, dc, 0.1 * scale, rng);
  w.calib.u2 = detail::gaussian(dc, vocab, scale / std::sqrt(static_cast<double>(dc)), rng);
  w.calib.b2 = detail::gaussian(1, vocab, 0.1 * scale, rng);
  return w;
}

}  // namespace blockspec
