// Copyright 2026 The blockspec Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "blockspec/layout.hpp"
#include "blockspec/model.hpp"
#include "blockspec/rng.hpp"
#include "blockspec/sampler.hpp"
#include "blockspec/tensor.hpp"
#include "json.hpp"

namespace blockspec {

enum class DecodeMode : std::uint8_t { kParallel, kSequential };

inline const char* to_string(DecodeMode m) { return m == DecodeMode::kParallel ? "parallel" : "sequential"; }

inline DecodeMode parse_mode(const std::string& s) {
  if (s == "parallel") return DecodeMode::kParallel;
  if (s == "sequential") return DecodeMode::kSequential;
  throw std::invalid_argument("unknown decode mode '" + s + "'");
}

/// Drafted tokens awaiting verification.
struct DraftBlock {
  std::vector<int> tokens;
  std::vector<Categorical> dists;   // distribution each token was sampled from
  std::vector<double> draft_probs;  // dists[i][tokens[i]]
  std::vector<double> confidence;   // untempered drafter probability of tokens[i]
  int origin_branch = 0;            // -1 for a decoupled draft pass
  bool calibrated = false;

  std::size_t size() const { return tokens.size(); }
};

/// Rows of one forward pass. Full-depth rows run every layer; partial rows are
/// mask rows, which only exist in the last N layers.
struct PassRows {
  std::size_t full = 0;
  std::size_t partial = 0;

  friend bool operator==(const PassRows&, const PassRows&) = default;
};

/// Per-step record; `rows_full` and `rows_partial` sum over `passes`.
struct StepStats {
  std::uint64_t step = 0;
  DecodeMode mode = DecodeMode::kParallel;
  std::size_t rows_full = 0;
  std::size_t rows_partial = 0;
  std::size_t main_forward_rows = 0;  // rows of the draft-and-verify (or verify) forward alone
  std::vector<PassRows> passes;
  std::vector<std::size_t> kept;      // parallel only
  std::size_t accepted = 0;
  std::size_t committed = 0;
  bool fallback = false;  // a decoupled draft pass ran because the accepted branch was pruned
  double est_cost = 0.0;

  nlohmann::json to_json() const {
    return {{"step", step},
            {"mode", to_string(mode)},
            {"rows_forwarded", rows_full + rows_partial},
            {"rows_full", rows_full},
            {"rows_partial", rows_partial},
            {"kept_branches", kept},
            {"r_acc", accepted},
            {"committed", committed},
            {"fallback", fallback}};
  }
};

/// Raw outputs of every kept branch of a parallel forward, held until the
/// bonus is known and calibration can run.
struct CandidateGroup {
  std::vector<std::size_t> branches;
  std::vector<Matrix> hidden;  // per branch, M x d
  std::vector<Matrix> logits;  // per branch, M x |V|, uncalibrated

  static CandidateGroup collect(const ForwardOutput& out, const AttentionLayout& layout,
                                std::span<const std::size_t> kept) {
    CandidateGroup g;
    for (std::size_t r : kept) {
      const auto rows = layout.block_rows(static_cast<int>(r));
      g.branches.push_back(r);
      g.hidden.push_back(detail::gather_rows(out.hidden, rows));
      g.logits.push_back(detail::gather_rows(out.logits, rows));
    }
    return g;
  }

  /// Index into the vectors for branch r, if it was kept.
  std::optional<std::size_t> find(std::size_t r) const {
    auto it = std::find(branches.begin(), branches.end(), r);
    if (it == branches.end()) return std::nullopt;
    return static_cast<std::size_t>(it - branches.begin());
  }
};

struct EngineConfig {
  DecodeMode mode = DecodeMode::kParallel;
  double theta = 0.05;
  double temperature = 0.0;
  std::size_t max_new_tokens = 32;
  std::optional<int> stop_token;
  std::uint64_t seed = 0;
};

/// One decode stream. Exclusively owned by whoever steps it.
///
/// Parallel mode keeps the last committed token (the bonus) out of the cache:
/// it is the first frozen row of the next forward, so kv.length() ==
/// tokens.size() - 1 between steps. Sequential mode runs the bonus inside the
/// draft pass, so kv.length() == tokens.size() and `bonus_logits` holds the
/// target logits for the position after it.
struct StreamState {
  std::uint64_t id = 0;
  std::vector<int> tokens;
  std::size_t prompt_len = 0;
  KVStore kv;
  std::optional<DraftBlock> pending;
  DecodeMode mode = DecodeMode::kParallel;
  std::uint64_t step = 0;
  double temperature = 0.0;
  bool finished = false;
  std::vector<double> bonus_logits;
  Matrix last_draft_logits;  // raw mask-row logits of the latest draft pass

  std::span<const int> generated() const {
    return std::span<const int>(tokens).subspan(prompt_len);
  }
};

/// Keeps branch 0 and every branch r whose cumulative confidence
/// prod_{j<=r} confidence[j] is at least theta. The product never increases,
/// so the result is a prefix {0..r_max}.
inline std::vector<std::size_t> select_branches(const DraftBlock& pending, double theta) {
  if (!(theta >= 0.0 && theta <= 1.0)) throw std::invalid_argument("select_branches: theta outside [0, 1]");
  std::vector<std::size_t> kept{0};
  double cumulative = 1.0;
  for (std::size_t r = 1; r <= pending.size(); ++r) {
    cumulative *= pending.confidence[r - 1];
    if (cumulative < theta) break;
    kept.push_back(r);
  }
  return kept;
}

/// logits + U2 * gelu(U1 * [bonus_embedding; hidden] + b1) + b2
inline std::vector<double> calibrate(std::span<const double> logits, std::span<const double> hidden,
                                     std::span<const double> bonus_embedding, const CalibrationMlp& mlp) {
  const std::size_t d = hidden.size();
  if (bonus_embedding.size() != d || mlp.u1.rows != 2 * d || logits.size() != mlp.u2.cols) {
    throw std::invalid_argument("calibrate: dimension mismatch");
  }
  Matrix in(1, 2 * d);
  std::copy(bonus_embedding.begin(), bonus_embedding.end(), in.data.begin());
  std::copy(hidden.begin(), hidden.end(), in.data.begin() + static_cast<std::ptrdiff_t>(d));
  Matrix z = matmul(in, mlp.u1);
  add_inplace(z, mlp.b1);
  Matrix bias = matmul(gelu_rows(z), mlp.u2);
  add_inplace(bias, mlp.b2);
  std::vector<double> out(logits.begin(), logits.end());
  for (std::size_t v = 0; v < out.size(); ++v) out[v] += bias.data[v];
  return out;
}

/// Average committed tokens per step.
inline double acceptance_length_tau(std::span<const StepStats> stats) {
  if (stats.empty()) throw std::invalid_argument("acceptance_length_tau: no steps");
  std::size_t total = 0;
  for (const auto& s : stats) total += s.committed;
  return static_cast<double>(total) / static_cast<double>(stats.size());
}

/// Drives prefill and draft/verify steps for streams over a shared model.
class Engine {
 public:
  Engine(const Model& model, EngineConfig config) : model_(model), config_(std::move(config)) {
    model_.config.validate();
    if (!(config_.theta >= 0.0 && config_.theta <= 1.0)) throw std::invalid_argument("Engine: theta outside [0, 1]");
    if (!(config_.temperature >= 0.0)) throw std::invalid_argument("Engine: temperature must be >= 0");
    if (config_.max_new_tokens == 0) throw std::invalid_argument("Engine: max_new_tokens must be >= 1");
  }

  const EngineConfig& config() const { return config_; }
  const Model& model() const { return model_; }
  std::size_t slots() const { return static_cast<std::size_t>(model_.config.block_slots); }

  /// Runs the prompt, commits the first token as the initial bonus, and leaves
  /// a pending draft behind.
  StreamState prefill(std::uint64_t stream_id, std::span<const int> prompt) const {
    if (prompt.empty()) throw std::invalid_argument("prefill: empty prompt");
    StreamState st;
    st.id = stream_id;
    st.tokens.assign(prompt.begin(), prompt.end());
    st.prompt_len = prompt.size();
    st.kv = model_.make_kv();
    st.mode = config_.mode;
    st.temperature = config_.temperature;
    const std::size_t n = prompt.size();
    const std::size_t M = slots();
    const RngStream rng = rng_for(st);

    if (st.mode == DecodeMode::kParallel) {
      const AttentionLayout lay = build_draft_layout(0, n, M);
      const ForwardOutput out = forward(model_, st.kv, lay, prompt);
      const int bonus = sample_index(apply_temperature(out.logits.row(n - 1), st.temperature),
                                     rng.uniform(static_cast<std::int64_t>(n), Purpose::kBonus));
      commit(st, {bonus});
      if (!st.finished) {
        const std::size_t branch0[] = {0};
        const CandidateGroup group = CandidateGroup::collect(out, lay, branch0);
        st.pending = draft_from_branch(st, group.hidden[0], group.logits[0], bonus, rng, 0);
      }
    } else {
      const ForwardOutput out = forward(model_, st.kv, build_causal_layout(0, n), prompt);
      const int bonus = sample_index(apply_temperature(out.logits.row(n - 1), st.temperature),
                                     rng.uniform(static_cast<std::int64_t>(n), Purpose::kBonus));
      commit(st, {bonus});
      if (!st.finished) sequential_draft_pass(st, rng);
    }
    return st;
  }

  StepStats step(StreamState& st) const {
    if (st.finished) throw std::logic_error("step: stream already finished");
    return st.mode == DecodeMode::kParallel ? parallel_step(st) : sequential_step(st);
  }

  /// One forward verifies the pending draft and prepares the next draft for
  /// every kept acceptance length.
  StepStats parallel_step(StreamState& st) const {
    if (st.mode != DecodeMode::kParallel) throw std::logic_error("parallel_step: stream is sequential");
    ++st.step;
    const RngStream rng = rng_for(st);
    const std::size_t M = slots();
    StepStats stats;
    stats.step = st.step;
    stats.mode = DecodeMode::kParallel;

    if (!st.pending) {
      fallback_draft_pass(st, rng);
      stats.fallback = true;
      stats.passes.push_back({1, M});
    }
    const DraftBlock draft = std::move(*st.pending);
    st.pending.reset();
    const std::size_t m = st.tokens.size();
    const std::size_t k = draft.size();
    stats.kept = select_branches(draft, config_.theta);
    const AttentionLayout lay = build_parallel_layout(m - 1, k, stats.kept, M);

    std::vector<int> rows{st.tokens.back()};
    rows.insert(rows.end(), draft.tokens.begin(), draft.tokens.end());
    const ForwardOutput out = forward(model_, st.kv, lay, rows);
    stats.main_forward_rows = lay.size();
    stats.passes.push_back({k + 1, stats.kept.size() * M});
    const CandidateGroup group = CandidateGroup::collect(out, lay, stats.kept);

    std::vector<Categorical> targets;
    for (std::size_t i = 0; i <= k; ++i) targets.push_back(apply_temperature(out.logits.row(i), st.temperature));
    const VerifyOutcome v = verify(targets, draft, rng, static_cast<std::int64_t>(m));
    stats.accepted = v.accepted;

    truncate_kv(st.kv, m + v.accepted);
    const auto branch = group.find(v.accepted);
    stats.committed = commit(st, v.committed);
    if (!st.finished && branch) {
      st.pending = draft_from_branch(st, group.hidden[*branch], group.logits[*branch], v.bonus, rng,
                                     static_cast<int>(v.accepted));
    }
    tally(stats);
    return stats;
  }

  /// Verify forward over the pending drafts, then a decoupled draft pass that
  /// reuses the verified cache.
  StepStats sequential_step(StreamState& st) const {
    if (st.mode != DecodeMode::kSequential) throw std::logic_error("sequential_step: stream is parallel");
    if (!st.pending) throw std::logic_error("sequential_step: no pending draft");
    ++st.step;
    const RngStream rng = rng_for(st);
    const std::size_t M = slots();
    StepStats stats;
    stats.step = st.step;
    stats.mode = DecodeMode::kSequential;

    const DraftBlock draft = std::move(*st.pending);
    st.pending.reset();
    const std::size_t m = st.tokens.size();
    const AttentionLayout lay = build_causal_layout(m, draft.size());
    const ForwardOutput out = forward(model_, st.kv, lay, draft.tokens);
    stats.main_forward_rows = lay.size();
    stats.passes.push_back({draft.size(), 0});

    std::vector<Categorical> targets{apply_temperature(st.bonus_logits, st.temperature)};
    for (std::size_t i = 0; i < draft.size(); ++i) {
      targets.push_back(apply_temperature(out.logits.row(i), st.temperature));
    }
    const VerifyOutcome v = verify(targets, draft, rng, static_cast<std::int64_t>(m));
    stats.accepted = v.accepted;
    truncate_kv(st.kv, m + v.accepted);
    stats.committed = commit(st, v.committed);
    if (!st.finished) {
      sequential_draft_pass(st, rng);
      stats.passes.push_back({1, M});
    }
    tally(stats);
    return stats;
  }

  /// Prefill then step until the stream finishes.
  std::vector<StepStats> run(StreamState& st) const {
    std::vector<StepStats> stats;
    while (!st.finished) stats.push_back(step(st));
    return stats;
  }

 private:
  static void tally(StepStats& stats) {
    for (const auto& p : stats.passes) {
      stats.rows_full += p.full;
      stats.rows_partial += p.partial;
    }
  }

  RngStream rng_for(const StreamState& st) const { return RngStream(config_.seed, st.id, st.step); }

  VerifyOutcome verify(std::span<const Categorical> targets, const DraftBlock& draft, const RngStream& rng,
                       std::int64_t first_position) const {
    if (config_.temperature == 0.0) return greedy_verify(targets, draft.tokens);
    return speculative_verify(targets, draft.tokens, draft.dists, rng, first_position);
  }

  /// Appends tokens until the budget or a stop token ends the stream. Returns
  /// how many were appended.
  std::size_t commit(StreamState& st, const std::vector<int>& toks) const {
    std::size_t appended = 0;
    for (int t : toks) {
      st.tokens.push_back(t);
      ++appended;
      if (st.tokens.size() - st.prompt_len >= config_.max_new_tokens ||
          (config_.stop_token && t == *config_.stop_token)) {
        st.finished = true;
        st.pending.reset();
        break;
      }
    }
    return appended;
  }

  DraftBlock sample_block(const Matrix& logits, std::int64_t first_position, const RngStream& rng) const {
    DraftBlock b;
    for (std::size_t s = 0; s < logits.rows; ++s) {
      Categorical dist = apply_temperature(logits.row(s), config_.temperature);
      const int tok =
          sample_index(dist, rng.uniform(first_position + static_cast<std::int64_t>(s), Purpose::kDraft));
      const Categorical raw = apply_temperature(logits.row(s), 1.0);
      b.tokens.push_back(tok);
      b.draft_probs.push_back(dist[static_cast<std::size_t>(tok)]);
      b.confidence.push_back(raw[static_cast<std::size_t>(tok)]);
      b.dists.push_back(std::move(dist));
    }
    return b;
  }

  /// Next draft from branch rows (slot 0 is the bonus position and is dropped),
  /// calibrated with the resolved bonus.
  DraftBlock draft_from_branch(StreamState& st, const Matrix& hidden, const Matrix& logits, int bonus,
                               const RngStream& rng, int branch) const {
    const auto e_b = model_.frozen.embed.row(static_cast<std::size_t>(bonus));
    Matrix cal(logits.rows - 1, logits.cols);
    st.last_draft_logits = logits;
    for (std::size_t s = 1; s < logits.rows; ++s) {
      const auto c = calibrate(logits.row(s), hidden.row(s), e_b, model_.draft.calib);
      std::copy(c.begin(), c.end(), cal.row(s - 1).begin());
    }
    DraftBlock b = sample_block(cal, static_cast<std::int64_t>(st.tokens.size()), rng);
    b.origin_branch = branch;
    b.calibrated = true;
    return b;
  }

  /// Bonus row (full depth, persisted) plus one mask block; all slots drafted
  /// from raw logits.
  void sequential_draft_pass(StreamState& st, const RngStream& rng) const {
    const std::size_t m = st.tokens.size();
    const AttentionLayout lay = build_sequential_draft_layout(m, slots());
    const int bonus = st.tokens.back();
    const ForwardOutput out = forward(model_, st.kv, lay, std::span<const int>(&bonus, 1));
    st.bonus_logits.assign(out.logits.row(0).begin(), out.logits.row(0).end());
    st.last_draft_logits = detail::gather_rows(out.logits, lay.block_rows(0));
    DraftBlock b = sample_block(st.last_draft_logits, static_cast<std::int64_t>(m), rng);
    b.origin_branch = -1;
    st.pending = std::move(b);
  }

  /// Parallel-mode recovery when the accepted length was pruned: draft with the
  /// bonus visible, keep M-1 slots, then drop the bonus from the cache again so
  /// the next parallel forward starts from it as usual.
  void fallback_draft_pass(StreamState& st, const RngStream& rng) const {
    const std::size_t m = st.tokens.size();
    const AttentionLayout lay = build_sequential_draft_layout(m, slots());
    const int bonus = st.tokens.back();
    const ForwardOutput out = forward(model_, st.kv, lay, std::span<const int>(&bonus, 1));
    truncate_kv(st.kv, m - 1);
    auto rows = lay.block_rows(0);
    st.last_draft_logits = detail::gather_rows(out.logits, rows);
    rows.pop_back();
    DraftBlock b = sample_block(detail::gather_rows(out.logits, rows), static_cast<std::int64_t>(m), rng);
    b.origin_branch = -1;
    st.pending = std::move(b);
  }

  const Model& model_;
  EngineConfig config_;
};

}  // namespace blockspec
