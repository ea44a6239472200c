// Copyright 2026 The blockspec Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "blockspec/config.hpp"
#include "blockspec/kv_store.hpp"
#include "blockspec/layout.hpp"
#include "blockspec/tensor.hpp"
#include "blockspec/weights.hpp"

namespace blockspec {

/// Frozen target plus drafter. Immutable during decoding and safe to share
/// between streams.
struct Model {
  ModelConfig config;
  FrozenWeights frozen;
  DraftWeights draft;

  KVStore make_kv() const {
    return KVStore(static_cast<std::size_t>(config.n_layers), static_cast<std::size_t>(config.d_model));
  }
};

struct ForwardOptions {
  /// Test hook: replaces the mask-row hidden state injected at the first draft
  /// layer (one row per mask row, in layout order) instead of the mask embedding.
  const Matrix* mask_init = nullptr;
};

struct ForwardOutput {
  Matrix hidden;  // rows x d, final-norm output (the LM head input)
  Matrix logits;  // rows x |V|
  std::size_t kv_appended = 0;
};

namespace detail {

inline Matrix gather_rows(const Matrix& x, const std::vector<std::size_t>& idx) {
  Matrix out(idx.size(), x.cols);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    std::copy(x.row(idx[i]).begin(), x.row(idx[i]).end(), out.row(i).begin());
  }
  return out;
}

inline std::vector<std::int64_t> gather_positions(const AttentionLayout& lay, const std::vector<std::size_t>& idx) {
  std::vector<std::int64_t> p;
  p.reserve(idx.size());
  for (std::size_t i : idx) p.push_back(lay.row(i).position);
  return p;
}

// x += ffn(rmsnorm(x)) with frozen weights.
inline void ffn_residual(Matrix& x, const FrozenLayer& layer, double eps) {
  if (x.rows == 0) return;
  Matrix f = gelu_rows(matmul(rmsnorm_rows(x, layer.ffn_gain, eps), layer.w1));
  add_inplace(x, matmul(f, layer.w2));
}

}  // namespace detail

/// One forward pass over `layout`.
///
/// Frozen rows run every layer with the frozen projectors and append their
/// keys/values to `kv`. Mask rows enter at layer L-N initialized to the mask
/// embedding, use the drafter's projectors, share the frozen FFN and norms,
/// and only ever write per-forward scratch.
inline ForwardOutput forward(const Model& model, KVStore& kv, const AttentionLayout& layout,
                             std::span<const int> tokens, const ForwardOptions& opts = {}) {
  const ModelConfig& cfg = model.config;
  const std::size_t c = layout.cache_len();
  const std::size_t n = layout.size();
  const auto d = static_cast<std::size_t>(cfg.d_model);
  const auto heads = static_cast<std::size_t>(cfg.n_heads);
  const auto first = static_cast<std::size_t>(cfg.first_draft_layer());

  if (kv.length() != c) {
    throw std::invalid_argument("forward: layout expects " + std::to_string(c) + " cached positions, KV has " +
                                std::to_string(kv.length()));
  }
  std::vector<std::size_t> frozen_idx, mask_idx;
  for (std::size_t i = 0; i < n; ++i) (layout.is_mask(i) ? mask_idx : frozen_idx).push_back(i);
  if (tokens.size() != frozen_idx.size()) {
    throw std::invalid_argument("forward: " + std::to_string(tokens.size()) + " tokens for " +
                                std::to_string(frozen_idx.size()) + " frozen rows");
  }
  for (std::size_t r = 0; r < frozen_idx.size(); ++r) {
    if (layout.row(frozen_idx[r]).position != static_cast<std::int64_t>(c + r)) {
      throw std::invalid_argument("forward: frozen rows must be contiguous after the cache");
    }
  }
  if (opts.mask_init && (opts.mask_init->rows != mask_idx.size() || opts.mask_init->cols != d)) {
    throw std::invalid_argument("forward: mask_init shape");
  }

  std::vector<std::vector<std::size_t>> vis_f(frozen_idx.size()), vis_m(mask_idx.size());
  for (std::size_t r = 0; r < frozen_idx.size(); ++r) vis_f[r] = layout.visible_keys(frozen_idx[r]);
  for (std::size_t r = 0; r < mask_idx.size(); ++r) vis_m[r] = layout.visible_keys(mask_idx[r]);
  const auto pos_f = detail::gather_positions(layout, frozen_idx);
  const auto pos_m = detail::gather_positions(layout, mask_idx);

  Matrix xf(frozen_idx.size(), d);
  for (std::size_t r = 0; r < tokens.size(); ++r) {
    if (tokens[r] < 0 || tokens[r] >= cfg.vocab_size) {
      throw std::invalid_argument("forward: token id " + std::to_string(tokens[r]) + " out of range");
    }
    const auto src = model.frozen.embed.row(static_cast<std::size_t>(tokens[r]));
    std::copy(src.begin(), src.end(), xf.row(r).begin());
  }
  Matrix xm(mask_idx.size(), d);

  Matrix keys(c + n, d), values(c + n, d);
  for (std::size_t l = 0; l < static_cast<std::size_t>(cfg.n_layers); ++l) {
    const FrozenLayer& layer = model.frozen.layers[l];
    const bool mask_active = l >= first && !mask_idx.empty();
    if (l == first && !mask_idx.empty()) {
      for (std::size_t r = 0; r < mask_idx.size(); ++r) {
        const auto src = opts.mask_init ? opts.mask_init->row(r) : model.draft.mask_embed.row(0);
        std::copy(src.begin(), src.end(), xm.row(r).begin());
      }
    }

    const Matrix af = rmsnorm_rows(xf, layer.attn_gain, cfg.norm_eps);
    Matrix qf = matmul(af, layer.attn.wq);
    Matrix kf = matmul(af, layer.attn.wk);
    Matrix vf = matmul(af, layer.attn.wv);
    apply_rope(qf, pos_f, heads, cfg.rope_base);
    apply_rope(kf, pos_f, heads, cfg.rope_base);

    Matrix qm, km, vm;
    const AttentionProjectors* dp = nullptr;
    if (mask_active) {
      dp = &model.draft.layers[l - first];
      const Matrix am = rmsnorm_rows(xm, layer.attn_gain, cfg.norm_eps);
      qm = matmul(am, dp->wq);
      km = matmul(am, dp->wk);
      vm = matmul(am, dp->wv);
      apply_rope(qm, pos_m, heads, cfg.rope_base);
      apply_rope(km, pos_m, heads, cfg.rope_base);
    }

    for (std::size_t p = 0; p < c; ++p) {
      std::copy_n(kv.key(l, p), d, keys.row(p).begin());
      std::copy_n(kv.value(l, p), d, values.row(p).begin());
    }
    for (std::size_t r = 0; r < frozen_idx.size(); ++r) {
      std::copy(kf.row(r).begin(), kf.row(r).end(), keys.row(c + frozen_idx[r]).begin());
      std::copy(vf.row(r).begin(), vf.row(r).end(), values.row(c + frozen_idx[r]).begin());
    }
    if (mask_active) {
      for (std::size_t r = 0; r < mask_idx.size(); ++r) {
        std::copy(km.row(r).begin(), km.row(r).end(), keys.row(c + mask_idx[r]).begin());
        std::copy(vm.row(r).begin(), vm.row(r).end(), values.row(c + mask_idx[r]).begin());
      }
    }

    if (!frozen_idx.empty()) {
      add_inplace(xf, matmul(attention(qf, keys, values, vis_f, heads), layer.attn.wo));
    }
    if (mask_active) {
      add_inplace(xm, matmul(attention(qm, keys, values, vis_m, heads), dp->wo));
    }
    detail::ffn_residual(xf, layer, cfg.norm_eps);
    if (mask_active) detail::ffn_residual(xm, layer, cfg.norm_eps);

    kv.stage_layer(l, kf, vf);
  }
  kv.commit_append(frozen_idx.size());

  ForwardOutput out;
  out.kv_appended = frozen_idx.size();
  out.hidden = Matrix(n, d);
  const Matrix hf = rmsnorm_rows(xf, model.frozen.final_gain, cfg.norm_eps);
  for (std::size_t r = 0; r < frozen_idx.size(); ++r) {
    std::copy(hf.row(r).begin(), hf.row(r).end(), out.hidden.row(frozen_idx[r]).begin());
  }
  if (!mask_idx.empty()) {
    const Matrix hm = rmsnorm_rows(xm, model.frozen.final_gain, cfg.norm_eps);
    for (std::size_t r = 0; r < mask_idx.size(); ++r) {
      std::copy(hm.row(r).begin(), hm.row(r).end(), out.hidden.row(mask_idx[r]).begin());
    }
  }
  out.logits = matmul(out.hidden, model.frozen.head);
  require_finite(out.hidden, "forward");
  return out;
}

/// logits = h * head (no bias).
inline std::vector<double> lm_head(const FrozenWeights& frozen, std::span<const double> h) {
  Matrix row(1, h.size(), std::vector<double>(h.begin(), h.end()));
  require_finite(row, "lm_head");
  return matmul(row, frozen.head).data;
}

/// Rolls the cache back to `new_len` committed positions.
inline void truncate_kv(KVStore& kv, std::size_t new_len) { kv.truncate(new_len); }

/// Next-token logits for every position of `tokens` on a fresh cache.
inline Matrix causal_logits(const Model& model, std::span<const int> tokens) {
  KVStore kv = model.make_kv();
  return forward(model, kv, build_causal_layout(0, tokens.size()), tokens).logits;
}

}  // namespace blockspec
