// Copyright 2026 The blockspec Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "blockspec/tensor.hpp"

namespace blockspec {

/// Persistent per-stream key/value cache, one (keys, values) pair per layer.
///
/// Keys are stored after rotary embedding. Only frozen-route rows are ever
/// appended; mask rows live in per-forward scratch inside `forward`.
class KVStore {
 public:
  KVStore() = default;
  KVStore(std::size_t n_layers, std::size_t d_model) : d_(d_model), keys_(n_layers), values_(n_layers) {}

  std::size_t length() const { return len_; }
  std::size_t n_layers() const { return keys_.size(); }
  std::size_t d_model() const { return d_; }

  /// Row `pos` of layer `layer`.
  const double* key(std::size_t layer, std::size_t pos) const { return keys_[layer].data() + pos * d_; }
  const double* value(std::size_t layer, std::size_t pos) const { return values_[layer].data() + pos * d_; }

  /// Appends `k.rows` positions to one layer. All layers must be appended the
  /// same number of rows before calling `commit_append`.
  void stage_layer(std::size_t layer, const Matrix& k, const Matrix& v) {
    if (k.cols != d_ || v.cols != d_ || k.rows != v.rows) throw std::invalid_argument("KVStore: row shape");
    if (keys_[layer].size() != len_ * d_) throw std::logic_error("KVStore: layer staged twice");
    keys_[layer].insert(keys_[layer].end(), k.data.begin(), k.data.end());
    values_[layer].insert(values_[layer].end(), v.data.begin(), v.data.end());
  }

  void commit_append(std::size_t n_rows) {
    for (std::size_t l = 0; l < keys_.size(); ++l) {
      if (keys_[l].size() != (len_ + n_rows) * d_) throw std::logic_error("KVStore: inconsistent layer append");
    }
    len_ += n_rows;
  }

  /// Drops every position >= new_len in all layers.
  void truncate(std::size_t new_len) {
    if (new_len > len_) {
      throw std::invalid_argument("KVStore::truncate: " + std::to_string(new_len) + " exceeds length " +
                                  std::to_string(len_));
    }
    for (std::size_t l = 0; l < keys_.size(); ++l) {
      keys_[l].resize(new_len * d_);
      values_[l].resize(new_len * d_);
    }
    len_ = new_len;
  }

  friend bool operator==(const KVStore&, const KVStore&) = default;

 private:
  std::size_t d_ = 0;
  std::size_t len_ = 0;
  std::vector<std::vector<double>> keys_;
  std::vector<std::vector<double>> values_;
};

}  // namespace blockspec
