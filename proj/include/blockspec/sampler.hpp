// Copyright 2026 The blockspec Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "blockspec/rng.hpp"
#include "blockspec/tensor.hpp"

namespace blockspec {

/// Probability vector over the vocabulary.
struct Categorical {
  std::vector<double> probs;

  std::size_t size() const { return probs.size(); }
  double operator[](std::size_t i) const { return probs[i]; }

  void validate(double tol = 1e-12) const {
    double s = 0.0;
    for (double p : probs) {
      if (!(p >= 0.0) || !std::isfinite(p)) throw std::invalid_argument("Categorical: negative or non-finite entry");
      s += p;
    }
    if (std::abs(s - 1.0) > tol) throw std::invalid_argument("Categorical: sums to " + std::to_string(s));
  }

  static Categorical one_hot(std::size_t n, std::size_t at) {
    Categorical c{std::vector<double>(n, 0.0)};
    c.probs.at(at) = 1.0;
    return c;
  }
};

/// softmax(logits / T); T == 0 is exact greedy (one-hot at the lowest argmax).
inline Categorical apply_temperature(std::span<const double> logits, double temperature) {
  if (!(temperature >= 0.0)) throw std::invalid_argument("apply_temperature: T must be >= 0");
  if (temperature == 0.0) return Categorical::one_hot(logits.size(), argmax_tiebreak_low(logits));
  std::vector<double> scaled(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) scaled[i] = logits[i] / temperature;
  Categorical out{std::vector<double>(logits.size())};
  const std::vector<std::uint8_t> all(logits.size(), 1);
  softmax_visible(scaled, all, out.probs);
  return out;
}

/// normalize(max(0, p - q)).
inline Categorical residual(const Categorical& p, const Categorical& q) {
  if (p.size() != q.size()) throw std::invalid_argument("residual: size mismatch");
  Categorical r{std::vector<double>(p.size())};
  double mass = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    r.probs[i] = std::max(0.0, p[i] - q[i]);
    mass += r.probs[i];
  }
  if (!(mass > 0.0)) throw std::domain_error("residual: zero residual mass (rejection has probability 0)");
  for (double& v : r.probs) v /= mass;
  return r;
}

/// Inverse-CDF draw with a fixed scan order. Never returns a zero-probability
/// index, even if rounding leaves `u` past the accumulated total.
inline int sample_index(const Categorical& dist, double u) {
  double acc = 0.0;
  std::size_t last_nonzero = 0;
  for (std::size_t i = 0; i < dist.size(); ++i) {
    if (dist[i] <= 0.0) continue;
    last_nonzero = i;
    acc += dist[i];
    if (u < acc) return static_cast<int>(i);
  }
  return static_cast<int>(last_nonzero);
}

struct VerifyOutcome {
  std::size_t accepted = 0;  // drafts kept before the bonus
  int bonus = -1;
  std::vector<int> committed;  // accepted drafts followed by the bonus
};

/// Lossless speculative sampling. `targets` has one more entry than `drafts`;
/// draft i sits at absolute position first_position + i and is accepted with
/// probability min(1, p_i(d_i) / q_i(d_i)). At the first rejection the bonus is
/// drawn from residual(p_i, q_i); if all drafts pass, from targets[k].
inline VerifyOutcome speculative_verify(std::span<const Categorical> targets, std::span<const int> drafts,
                                        std::span<const Categorical> draft_dists, const RngStream& rng,
                                        std::int64_t first_position) {
  const std::size_t k = drafts.size();
  if (targets.size() != k + 1 || draft_dists.size() != k) {
    throw std::invalid_argument("speculative_verify: need k+1 targets and k draft distributions");
  }
  VerifyOutcome out;
  for (std::size_t i = 0; i < k; ++i) {
    const auto tok = static_cast<std::size_t>(drafts[i]);
    const double q = draft_dists[i].probs.at(tok);
    if (!(q > 0.0)) throw std::invalid_argument("speculative_verify: draft token has zero draft probability");
    const double p = targets[i][tok];
    const double u = rng.uniform(first_position + static_cast<std::int64_t>(i), Purpose::kAccept);
    if (u < std::min(1.0, p / q)) {
      out.committed.push_back(drafts[i]);
      ++out.accepted;
      continue;
    }
    // Rounding can leave no positive residual even though p(d) < q(d); the
    // residual is then indistinguishable from p itself.
    Categorical res;
    try {
      res = residual(targets[i], draft_dists[i]);
    } catch (const std::domain_error&) {
      res = targets[i];
    }
    out.bonus = sample_index(res, rng.uniform(first_position + static_cast<std::int64_t>(i), Purpose::kBonus));
    out.committed.push_back(out.bonus);
    return out;
  }
  out.bonus = sample_index(targets[k], rng.uniform(first_position + static_cast<std::int64_t>(k), Purpose::kBonus));
  out.committed.push_back(out.bonus);
  return out;
}

/// Temperature-0 verification: accept while the draft equals the target argmax.
inline VerifyOutcome greedy_verify(std::span<const Categorical> targets, std::span<const int> drafts) {
  const std::size_t k = drafts.size();
  if (targets.size() != k + 1) throw std::invalid_argument("greedy_verify: need k+1 targets");
  VerifyOutcome out;
  for (std::size_t i = 0; i <= k; ++i) {
    const int best = static_cast<int>(argmax_tiebreak_low(targets[i].probs));
    if (i < k && drafts[i] == best) {
      out.committed.push_back(best);
      ++out.accepted;
      continue;
    }
    out.bonus = best;
    out.committed.push_back(best);
    break;
  }
  return out;
}

/// Analytic one-step losslessness check: the probability that token v is
/// committed at a position (accepted as a draft, or emitted as bonus after a
/// rejection) must equal p(v). Returns max_v |P(commit v) - p(v)|.
inline double committed_marginal_identity(const Categorical& p, const Categorical& q) {
  if (p.size() != q.size()) throw std::invalid_argument("committed_marginal_identity: size mismatch");
  const std::size_t n = p.size();
  std::vector<double> accept(n);
  double accept_total = 0.0;
  for (std::size_t v = 0; v < n; ++v) {
    accept[v] = q[v] > 0.0 ? q[v] * std::min(1.0, p[v] / q[v]) : 0.0;
    accept_total += accept[v];
  }
  const double reject = 1.0 - accept_total;
  std::vector<double> res(n, 0.0);
  double mass = 0.0;
  for (std::size_t v = 0; v < n; ++v) {
    res[v] = std::max(0.0, p[v] - q[v]);
    mass += res[v];
  }
  double worst = 0.0;
  for (std::size_t v = 0; v < n; ++v) {
    const double via_residual = mass > 0.0 ? reject * res[v] / mass : 0.0;
    worst = std::max(worst, std::abs(accept[v] + via_residual - p[v]));
  }
  return worst;
}

}  // namespace blockspec
