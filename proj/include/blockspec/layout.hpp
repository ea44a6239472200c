// Copyright 2026 The blockspec Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace blockspec {

enum class Route : std::uint8_t { kFrozen, kMask };

struct LayoutRow {
  std::int64_t position = 0;
  Route route = Route::kFrozen;
  int block = -1;  // branch or anchor tag; -1 for frozen rows
};

/// Row-level visibility for one forward pass.
///
/// Keys are numbered with cached positions first (0..cache_len-1) followed by
/// the rows of this forward (cache_len + row index).
class AttentionLayout {
 public:
  AttentionLayout() = default;
  AttentionLayout(std::size_t cache_len, std::vector<LayoutRow> rows)
      : cache_len_(cache_len), rows_(std::move(rows)), vis_(rows_.size() * key_count(), 0) {}

  std::size_t cache_len() const { return cache_len_; }
  std::size_t size() const { return rows_.size(); }
  std::size_t key_count() const { return cache_len_ + rows_.size(); }
  const LayoutRow& row(std::size_t i) const { return rows_.at(i); }
  const std::vector<LayoutRow>& rows() const { return rows_; }

  bool sees(std::size_t row, std::size_t key) const { return vis_[row * key_count() + key] != 0; }
  void set(std::size_t row, std::size_t key, bool v = true) { vis_[row * key_count() + key] = v ? 1 : 0; }
  bool sees_row(std::size_t row, std::size_t other) const { return sees(row, cache_len_ + other); }
  void set_row(std::size_t row, std::size_t other, bool v = true) { set(row, cache_len_ + other, v); }

  /// Visible key indices of `row`, in key order.
  std::vector<std::size_t> visible_keys(std::size_t row) const {
    std::vector<std::size_t> out;
    for (std::size_t k = 0; k < key_count(); ++k) {
      if (sees(row, k)) out.push_back(k);
    }
    return out;
  }

  std::size_t count(Route r) const {
    return static_cast<std::size_t>(
        std::count_if(rows_.begin(), rows_.end(), [r](const LayoutRow& x) { return x.route == r; }));
  }
  bool is_mask(std::size_t i) const { return rows_[i].route == Route::kMask; }

  /// Row indices of mask rows tagged `block`, in row order.
  std::vector<std::size_t> block_rows(int block) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < rows_.size(); ++i) {
      if (rows_[i].route == Route::kMask && rows_[i].block == block) out.push_back(i);
    }
    return out;
  }

  std::vector<std::int64_t> positions() const {
    std::vector<std::int64_t> p;
    p.reserve(rows_.size());
    for (const auto& r : rows_) p.push_back(r.position);
    return p;
  }

  /// Text grid: one line per row, '#' visible, '.' hidden; cache columns, a
  /// '|' separator, then forward-row columns.
  std::string dump() const {
    std::ostringstream os;
    os << "cache=" << cache_len_ << " rows=" << rows_.size() << "\n";
    for (std::size_t i = 0; i < rows_.size(); ++i) {
      const auto& r = rows_[i];
      os << (r.route == Route::kFrozen ? 'F' : 'M') << " pos=" << r.position << " blk=";
      if (r.block < 0) {
        os << '-';
      } else {
        os << r.block;
      }
      os << ' ';
      for (std::size_t k = 0; k < key_count(); ++k) {
        if (k == cache_len_) os << '|';
        os << (sees(i, k) ? '#' : '.');
      }
      os << "\n";
    }
    return os.str();
  }

  friend bool operator==(const AttentionLayout& a, const AttentionLayout& b) {
    if (a.cache_len_ != b.cache_len_ || a.rows_.size() != b.rows_.size() || a.vis_ != b.vis_) return false;
    for (std::size_t i = 0; i < a.rows_.size(); ++i) {
      const auto &x = a.rows_[i], &y = b.rows_[i];
      if (x.position != y.position || x.route != y.route || x.block != y.block) return false;
    }
    return true;
  }

 private:
  std::size_t cache_len_ = 0;
  std::vector<LayoutRow> rows_;
  std::vector<std::uint8_t> vis_;
};

struct LayoutViolation {
  std::string rule;
  std::size_t row = 0;
  std::size_t key = 0;  // key index (cache positions first)

  std::string describe() const {
    return rule + " (row " + std::to_string(row) + ", key " + std::to_string(key) + ")";
  }
};

namespace detail {

// Frozen rows 0..n-1 at positions cache_len.., causal over cache + themselves.
inline void fill_causal(AttentionLayout& lay, std::size_t n_frozen) {
  for (std::size_t i = 0; i < n_frozen; ++i) {
    for (std::size_t c = 0; c < lay.cache_len(); ++c) lay.set(i, c);
    for (std::size_t j = 0; j <= i; ++j) lay.set_row(i, j);
  }
}

// Appends the rows of one mask block starting at `first_pos`.
inline void push_block(std::vector<LayoutRow>& rows, std::int64_t first_pos, std::size_t slots, int block) {
  for (std::size_t s = 0; s < slots; ++s) {
    rows.push_back({first_pos + static_cast<std::int64_t>(s), Route::kMask, block});
  }
}

// Block `block` sees every cache position, frozen rows [0, n_prefix), and itself.
inline void wire_block(AttentionLayout& lay, int block, std::size_t n_prefix) {
  const auto members = lay.block_rows(block);
  for (std::size_t i : members) {
    for (std::size_t c = 0; c < lay.cache_len(); ++c) lay.set(i, c);
    for (std::size_t j = 0; j < n_prefix; ++j) lay.set_row(i, j);
    for (std::size_t j : members) lay.set_row(i, j);
  }
}

}  // namespace detail

/// Frozen rows only, causal on top of `cache_len` cached positions.
inline AttentionLayout build_causal_layout(std::size_t cache_len, std::size_t n_rows) {
  std::vector<LayoutRow> rows;
  for (std::size_t i = 0; i < n_rows; ++i) {
    rows.push_back({static_cast<std::int64_t>(cache_len + i), Route::kFrozen, -1});
  }
  AttentionLayout lay(cache_len, std::move(rows));
  detail::fill_causal(lay, n_rows);
  return lay;
}

/// Packed training layout: clean rows 0..seq_len-1, then for each anchor n a
/// block of `slots` mask rows at positions n+1..n+slots seeing clean rows <= n.
inline AttentionLayout build_training_layout(std::size_t seq_len, const std::vector<std::size_t>& anchors,
                                             std::size_t slots) {
  std::set<std::size_t> seen;
  std::vector<LayoutRow> rows;
  for (std::size_t i = 0; i < seq_len; ++i) rows.push_back({static_cast<std::int64_t>(i), Route::kFrozen, -1});
  for (std::size_t n : anchors) {
    if (n + slots >= seq_len) {
      throw std::invalid_argument("build_training_layout: anchor " + std::to_string(n) +
                                  " leaves no room for " + std::to_string(slots) + " targets");
    }
    if (!seen.insert(n).second) throw std::invalid_argument("build_training_layout: duplicate anchor");
    detail::push_block(rows, static_cast<std::int64_t>(n) + 1, slots, static_cast<int>(n));
  }
  AttentionLayout lay(0, std::move(rows));
  detail::fill_causal(lay, seq_len);
  for (std::size_t n : anchors) detail::wire_block(lay, static_cast<int>(n), n + 1);
  return lay;
}

/// Parallel draft-and-verify forward. Frozen rows are the pending bonus at
/// position cache_len and k drafts after it; branch r (for r in `kept`) is a
/// block of `slots` mask rows at cache_len+r+1.. that sees the cache, the
/// bonus, and drafts d_1..d_r.
inline AttentionLayout build_parallel_layout(std::size_t cache_len, std::size_t k,
                                             const std::vector<std::size_t>& kept, std::size_t slots) {
  std::vector<LayoutRow> rows;
  for (std::size_t i = 0; i <= k; ++i) rows.push_back({static_cast<std::int64_t>(cache_len + i), Route::kFrozen, -1});
  for (std::size_t r : kept) {
    if (r > k) throw std::invalid_argument("build_parallel_layout: branch " + std::to_string(r) + " > k");
    detail::push_block(rows, static_cast<std::int64_t>(cache_len + r + 1), slots, static_cast<int>(r));
  }
  AttentionLayout lay(cache_len, std::move(rows));
  detail::fill_causal(lay, k + 1);
  for (std::size_t r : kept) detail::wire_block(lay, static_cast<int>(r), r + 1);
  return lay;
}

/// `n_frozen` causal rows after `cache_len` cached positions, followed by one
/// mask block (block 0) that sees all of them.
inline AttentionLayout build_draft_layout(std::size_t cache_len, std::size_t n_frozen, std::size_t slots) {
  std::vector<LayoutRow> rows;
  for (std::size_t i = 0; i < n_frozen; ++i) {
    rows.push_back({static_cast<std::int64_t>(cache_len + i), Route::kFrozen, -1});
  }
  detail::push_block(rows, static_cast<std::int64_t>(cache_len + n_frozen), slots, 0);
  AttentionLayout lay(cache_len, std::move(rows));
  detail::fill_causal(lay, n_frozen);
  detail::wire_block(lay, 0, n_frozen);
  return lay;
}

/// Decoupled draft pass: the bonus (last committed token, position
/// committed_len-1) runs full depth, followed by one mask block.
inline AttentionLayout build_sequential_draft_layout(std::size_t committed_len, std::size_t slots) {
  if (committed_len == 0) throw std::invalid_argument("build_sequential_draft_layout: nothing committed");
  return build_draft_layout(committed_len - 1, 1, slots);
}

/// Checks the visibility rules; returns the first violation found.
inline std::optional<LayoutViolation> validate_layout(const AttentionLayout& lay) {
  const std::size_t c = lay.cache_len();
  const std::size_t n = lay.size();
  // Mask rows must never be visible to frozen rows.
  for (std::size_t i = 0; i < n; ++i) {
    if (lay.is_mask(i)) continue;
    for (std::size_t j = 0; j < n; ++j) {
      if (lay.is_mask(j) && lay.sees_row(i, j)) return LayoutViolation{"frozen row sees mask row", i, c + j};
    }
  }
  // Different blocks are mutually invisible.
  for (std::size_t i = 0; i < n; ++i) {
    if (!lay.is_mask(i)) continue;
    for (std::size_t j = 0; j < n; ++j) {
      if (lay.is_mask(j) && lay.row(j).block != lay.row(i).block && lay.sees_row(i, j)) {
        return LayoutViolation{"mask row sees another block", i, c + j};
      }
    }
  }
  // Frozen rows: contiguous positions after the cache, exactly causal.
  std::size_t frozen_seen = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (lay.is_mask(i)) continue;
    const auto pos = lay.row(i).position;
    if (pos != static_cast<std::int64_t>(c + frozen_seen)) {
      return LayoutViolation{"frozen row position not contiguous after cache", i, c + i};
    }
    ++frozen_seen;
    for (std::size_t k = 0; k < c; ++k) {
      if (!lay.sees(i, k)) return LayoutViolation{"frozen row misses cached position", i, k};
    }
    for (std::size_t j = 0; j < n; ++j) {
      if (lay.is_mask(j)) continue;
      const bool want = lay.row(j).position <= pos;
      if (lay.sees_row(i, j) != want) return LayoutViolation{"frozen row not causal", i, c + j};
    }
  }
  // Mask rows: see their whole block, nothing at or after their block's start
  // among frozen rows or the cache, and a frozen prefix shared by the block.
  for (std::size_t i = 0; i < n; ++i) {
    if (!lay.is_mask(i)) continue;
    const auto members = lay.block_rows(lay.row(i).block);
    std::int64_t start = lay.row(i).position;
    for (std::size_t j : members) start = std::min(start, lay.row(j).position);
    for (std::size_t j : members) {
      if (!lay.sees_row(i, j)) return LayoutViolation{"mask row misses its own block", i, c + j};
    }
    for (std::size_t k = 0; k < c; ++k) {
      if (lay.sees(i, k) && static_cast<std::int64_t>(k) >= start) {
        return LayoutViolation{"mask row sees a cached position at or after its block", i, k};
      }
    }
    for (std::size_t j = 0; j < n; ++j) {
      if (lay.is_mask(j)) continue;
      if (lay.sees_row(i, j) && lay.row(j).position >= start) {
        return LayoutViolation{"mask row sees a frozen row at or after its block", i, c + j};
      }
      if (lay.sees_row(i, j) != lay.sees_row(members.front(), j)) {
        return LayoutViolation{"mask block rows disagree on prefix", i, c + j};
      }
    }
  }
  return std::nullopt;
}

}  // namespace blockspec
