// Copyright 2026 The blockspec Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "blockspec/engine.hpp"
#include "json.hpp"

namespace blockspec {

/// Analytic step-time model.
///
/// A batched forward costs a fixed weight-read floor `beta`, plus `alpha` per
/// layer per token once the batch's layer-equivalent token count exceeds the
/// `saturation` budget that the memory-bound regime absorbs for free.
struct CostProfile {
  double alpha = 1.0;
  double beta = 200.0;
  double saturation = 64.0;

  void validate() const {
    if (!(alpha > 0.0) || !(beta > 0.0) || !(saturation >= 0.0)) {
      throw std::invalid_argument("CostProfile: need alpha > 0, beta > 0, saturation >= 0");
    }
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(CostProfile, alpha, beta, saturation)

/// Step totals for one stream. Parallel: the bonus plus M-1 drafts at full
/// depth and M mask rows per kept branch. Sequential: M verified drafts plus
/// the bonus row of the draft pass at full depth, and one M-row mask block.
inline PassRows forward_token_count(DecodeMode mode, std::size_t slots, std::size_t kept_branches) {
  if (mode == DecodeMode::kParallel) {
    if (kept_branches == 0 || kept_branches > slots) {
      throw std::invalid_argument("forward_token_count: kept branches must be in [1, M]");
    }
    return {1 + (slots - 1), kept_branches * slots};
  }
  return {slots + 1, slots};
}

/// The individual forwards of one step, in execution order.
inline std::vector<PassRows> forward_passes(DecodeMode mode, std::size_t slots, std::size_t kept_branches) {
  if (mode == DecodeMode::kParallel) return {forward_token_count(mode, slots, kept_branches)};
  return {{slots, 0}, {1, slots}};
}

struct DepthRatio {
  int n_layers = 1;
  int n_draft_layers = 1;
};

inline double estimate_forward_cost(const PassRows& pass, std::size_t batch, const CostProfile& profile,
                                    DepthRatio depth) {
  if (batch < 1) throw std::invalid_argument("estimate_forward_cost: batch must be >= 1");
  const double layers = static_cast<double>(depth.n_layers);
  const double tokens = static_cast<double>(pass.full) +
                        static_cast<double>(pass.partial) * static_cast<double>(depth.n_draft_layers) / layers;
  const double excess = std::max(0.0, static_cast<double>(batch) * tokens - profile.saturation);
  return profile.beta + profile.alpha * layers * excess;
}

/// Wall-time estimate of one lock-step batch step; every forward pays its own
/// memory floor.
inline double estimate_step_cost(std::span<const PassRows> passes, std::size_t batch, const CostProfile& profile,
                                 DepthRatio depth) {
  double total = 0.0;
  for (const auto& p : passes) total += estimate_forward_cost(p, batch, profile, depth);
  return total;
}

/// Cost of one plain autoregressive step (one full-depth row per stream).
inline double autoregressive_step_cost(std::size_t batch, const CostProfile& profile, DepthRatio depth) {
  return estimate_forward_cost({1, 0}, batch, profile, depth);
}

/// Parallel draft-and-verify while the batch is at most `threshold`.
inline DecodeMode choose_mode(std::size_t batch, std::size_t threshold) {
  if (threshold < 1) throw std::invalid_argument("choose_mode: threshold must be >= 1");
  return batch <= threshold ? DecodeMode::kParallel : DecodeMode::kSequential;
}

enum class ModePolicy : std::uint8_t { kAuto, kParallel, kSequential };

inline const char* to_string(ModePolicy p) {
  switch (p) {
    case ModePolicy::kAuto:
      return "auto";
    case ModePolicy::kParallel:
      return "parallel";
    case ModePolicy::kSequential:
      return "sequential";
  }
  return "?";
}

inline ModePolicy parse_policy(const std::string& s) {
  if (s == "auto") return ModePolicy::kAuto;
  if (s == "parallel") return ModePolicy::kParallel;
  if (s == "sequential") return ModePolicy::kSequential;
  throw std::invalid_argument("unknown mode '" + s + "'");
}

struct RunConfig {
  EngineConfig engine;  // `engine.mode` is overwritten by the policy
  ModePolicy policy = ModePolicy::kAuto;
  std::size_t threshold = 2;
  CostProfile profile;
};

struct StreamRecord {
  std::uint64_t stream_id = 0;
  std::size_t steps = 0;
  std::size_t tokens = 0;  // committed by draft/verify steps (prefill excluded)
  double tau = 0.0;
  std::size_t rows_full = 0;
  std::size_t rows_partial = 0;
  double est_cost = 0.0;
  double est_speedup = 0.0;
  DecodeMode mode = DecodeMode::kParallel;
  std::size_t fallbacks = 0;
  std::vector<int> output;  // all generated tokens, prefill token included
  std::vector<StepStats> trace;

  nlohmann::json to_json() const {
    return {{"stream_id", stream_id}, {"steps", steps},           {"tokens", tokens},
            {"tau", tau},             {"rows_full", rows_full},   {"rows_partial", rows_partial},
            {"est_cost", est_cost},   {"est_speedup", est_speedup}, {"mode", to_string(mode)},
            {"fallbacks", fallbacks}};
  }
};

struct RunReport {
  std::size_t batch = 0;
  DecodeMode mode = DecodeMode::kParallel;
  std::vector<StreamRecord> streams;  // sorted by stream id

  double tau() const {
    std::size_t tok = 0, steps = 0;
    for (const auto& s : streams) {
      tok += s.tokens;
      steps += s.steps;
    }
    return steps ? static_cast<double>(tok) / static_cast<double>(steps) : 0.0;
  }
};

/// Decodes every stream to completion in lock-step under one mode, chosen from
/// the batch size unless the policy forces it. Committed tokens do not depend
/// on batch composition beyond the mode choice: randomness is keyed per stream.
/// Costs are charged at the nominal batch size for every step.
inline RunReport run_batch(const Model& model, std::span<const std::vector<int>> prompts,
                           std::span<const std::uint64_t> stream_ids, const RunConfig& cfg) {
  if (prompts.empty()) throw std::invalid_argument("run_batch: no streams");
  if (prompts.size() != stream_ids.size()) throw std::invalid_argument("run_batch: ids/prompts mismatch");
  cfg.profile.validate();
  const std::size_t batch = prompts.size();
  DecodeMode mode = cfg.policy == ModePolicy::kParallel     ? DecodeMode::kParallel
                    : cfg.policy == ModePolicy::kSequential ? DecodeMode::kSequential
                                                            : choose_mode(batch, cfg.threshold);
  EngineConfig ec = cfg.engine;
  ec.mode = mode;
  const Engine engine(model, ec);
  const DepthRatio depth{model.config.n_layers, model.config.n_draft_layers};

  std::vector<StreamState> states;
  states.reserve(batch);
  for (std::size_t i = 0; i < batch; ++i) states.push_back(engine.prefill(stream_ids[i], prompts[i]));

  RunReport report;
  report.batch = batch;
  report.mode = mode;
  report.streams.resize(batch);
  for (std::size_t i = 0; i < batch; ++i) {
    report.streams[i].stream_id = stream_ids[i];
    report.streams[i].mode = mode;
  }

  for (;;) {
    const bool any_active = std::any_of(states.begin(), states.end(), [](const auto& s) { return !s.finished; });
    if (!any_active) break;
    for (std::size_t i = 0; i < batch; ++i) {
      if (states[i].finished) continue;
      StepStats st = engine.step(states[i]);
      st.est_cost = estimate_step_cost(st.passes, batch, cfg.profile, depth);
      auto& rec = report.streams[i];
      rec.steps += 1;
      rec.tokens += st.committed;
      rec.rows_full += st.rows_full;
      rec.rows_partial += st.rows_partial;
      rec.est_cost += st.est_cost;
      rec.fallbacks += st.fallback ? 1 : 0;
      rec.trace.push_back(std::move(st));
    }
  }

  for (std::size_t i = 0; i < batch; ++i) {
    auto& rec = report.streams[i];
    rec.output.assign(states[i].generated().begin(), states[i].generated().end());
    if (rec.steps > 0) {
      rec.tau = static_cast<double>(rec.tokens) / static_cast<double>(rec.steps);
      // Plain decoding pays one autoregressive step per committed token.
      const double baseline =
          static_cast<double>(rec.tokens) * autoregressive_step_cost(batch, cfg.profile, depth);
      rec.est_speedup = rec.est_cost > 0.0 ? baseline / rec.est_cost : 0.0;
    }
  }
  std::sort(report.streams.begin(), report.streams.end(),
            [](const StreamRecord& a, const StreamRecord& b) { return a.stream_id < b.stream_id; });
  return report;
}

}  // namespace blockspec
