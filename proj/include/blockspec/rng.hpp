// Copyright 2026 The blockspec Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>

namespace blockspec {

enum class Purpose : std::uint32_t { kAccept = 1, kBonus = 2, kDraft = 3 };

/// Counter-based uniform source keyed by (run seed, stream, step) and, per
/// draw, by (position, purpose). There is no mutable state: the same key always
/// yields the same draw, independent of what other streams or steps did.
class RngStream {
 public:
  RngStream(std::uint64_t seed, std::uint64_t stream, std::uint64_t step)
      : seed_(seed), stream_(stream), step_(step) {}

  std::uint64_t bits(std::int64_t position, Purpose purpose) const {
    std::uint64_t h = mix(seed_);
    h = mix(h ^ stream_);
    h = mix(h ^ step_);
    h = mix(h ^ static_cast<std::uint64_t>(position));
    return mix(h ^ static_cast<std::uint64_t>(purpose));
  }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform(std::int64_t position, Purpose purpose) const {
    return static_cast<double>(bits(position, purpose) >> 11) * 0x1.0p-53;
  }

  RngStream at_step(std::uint64_t step) const { return {seed_, stream_, step}; }
  std::uint64_t stream() const { return stream_; }
  std::uint64_t step() const { return step_; }

 private:
  // splitmix64 finalizer
  static std::uint64_t mix(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  std::uint64_t seed_;
  std::uint64_t stream_;
  std::uint64_t step_;
};

}  // namespace blockspec
