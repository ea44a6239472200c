// Copyright 2026 The blockspec Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

#include "json.hpp"

namespace blockspec {

/// Shape of the toy target plus its drafter.
///
/// The drafter lives in the last `n_draft_layers` layers. `block_slots` is the
/// number of mask rows per draft block: a parallel step drafts block_slots - 1
/// tokens (slot 0 lands on the bonus position), a sequential step drafts
/// block_slots tokens.
struct ModelConfig {
  int n_layers = 7;
  int n_draft_layers = 2;
  int d_model = 64;
  int n_heads = 4;
  int d_ff = 256;
  int vocab_size = 64;
  int block_slots = 5;
  double rope_base = 10000.0;
  int calib_hidden = 64;
  double norm_eps = 1e-6;

  int first_draft_layer() const { return n_layers - n_draft_layers; }
  int head_dim() const { return d_model / n_heads; }

  void validate() const {
    auto fail = [](const std::string& m) { throw std::invalid_argument("ModelConfig: " + m); };
    if (n_layers < 1) fail("n_layers must be >= 1");
    if (n_draft_layers < 1 || n_draft_layers > n_layers) fail("need 1 <= n_draft_layers <= n_layers");
    if (d_model < 1 || n_heads < 1 || d_model % n_heads != 0) fail("d_model must be divisible by n_heads");
    if ((d_model / n_heads) % 2 != 0) fail("head dim must be even for rotary embedding");
    if (d_ff < 1 || calib_hidden < 1) fail("d_ff and calib_hidden must be positive");
    if (block_slots < 2) fail("block_slots must be >= 2");
    if (vocab_size < 2) fail("vocab_size must be >= 2");
    if (!(rope_base > 0.0) || !(norm_eps > 0.0)) fail("rope_base and norm_eps must be positive");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ModelConfig, n_layers, n_draft_layers, d_model,
                                                n_heads, d_ff, vocab_size, block_slots, rope_base,
                                                calib_hidden, norm_eps)

/// 64-bit FNV-1a, used to fingerprint configs in report headers.
inline std::uint64_t fnv1a64(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace blockspec
