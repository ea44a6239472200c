// Copyright 2026 The blockspec Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include "blockspec/scheduler.hpp"
#include "support.hpp"

namespace blockspec {
namespace {

using testing::tiny_config;

TEST(ForwardTokenCount, Examples) {
  EXPECT_EQ(forward_token_count(DecodeMode::kParallel, 5, 5), (PassRows{5, 25}));
  EXPECT_EQ(forward_token_count(DecodeMode::kParallel, 5, 1), (PassRows{5, 5}));
  EXPECT_EQ(forward_token_count(DecodeMode::kSequential, 5, 0), (PassRows{6, 5}));
  EXPECT_EQ(forward_passes(DecodeMode::kSequential, 5, 0), (std::vector<PassRows>{{5, 0}, {1, 5}}));
  EXPECT_THROW(forward_token_count(DecodeMode::kParallel, 5, 6), std::invalid_argument);
}

TEST(ForwardTokenCount, MatchesExecutedLayouts) {
  for (std::size_t M = 2; M <= 6; ++M) {
    for (std::size_t kept = 1; kept <= M; ++kept) {
      std::vector<std::size_t> ks(kept);
      for (std::size_t i = 0; i < kept; ++i) ks[i] = i;
      const AttentionLayout lay = build_parallel_layout(4, M - 1, ks, M);
      const PassRows c = forward_token_count(DecodeMode::kParallel, M, kept);
      EXPECT_EQ(lay.count(Route::kFrozen), c.full);
      EXPECT_EQ(lay.count(Route::kMask), c.partial);
    }
    const auto seq = forward_passes(DecodeMode::kSequential, M, 0);
    const AttentionLayout verify = build_causal_layout(7, M), draft = build_sequential_draft_layout(7 + M, M);
    EXPECT_EQ(verify.size(), seq[0].full);
    EXPECT_EQ(draft.count(Route::kFrozen), seq[1].full);
    EXPECT_EQ(draft.count(Route::kMask), seq[1].partial);
  }
}

TEST(CostModel, FloorAndMonotonicity) {
  const CostProfile p;
  const DepthRatio depth{7, 2};
  EXPECT_EQ(estimate_forward_cost({5, 0}, 1, p, depth), p.beta);
  EXPECT_EQ(autoregressive_step_cost(64, p, depth), p.beta);
  EXPECT_EQ(autoregressive_step_cost(65, p, depth), p.beta + 7.0);
  EXPECT_LT(estimate_forward_cost({100, 0}, 1, p, depth), estimate_forward_cost({200, 0}, 1, p, depth));
  double prev = 0.0;
  for (std::size_t b = 1; b <= 64; ++b) {
    const double c = estimate_forward_cost({5, 25}, b, p, depth);
    EXPECT_GE(c, prev);
    prev = c;
    for (std::size_t kept = 1; kept < 5; ++kept) {
      EXPECT_LE(estimate_forward_cost(forward_token_count(DecodeMode::kParallel, 5, kept), b, p, depth),
                estimate_forward_cost(forward_token_count(DecodeMode::kParallel, 5, kept + 1), b, p, depth));
    }
  }
  EXPECT_THROW(estimate_forward_cost({1, 0}, 0, p, depth), std::invalid_argument);
  EXPECT_THROW((CostProfile{0.0, 1.0, 0.0}.validate()), std::invalid_argument);
}

TEST(CostModel, CrossoverWithDefaults) {
  const CostProfile p;
  const ModelConfig cfg;
  const DepthRatio depth{cfg.n_layers, cfg.n_draft_layers};
  const auto M = static_cast<std::size_t>(cfg.block_slots);
  const auto par = forward_passes(DecodeMode::kParallel, M, M);
  const auto seq = forward_passes(DecodeMode::kSequential, M, 0);
  EXPECT_LT(estimate_step_cost(par, 1, p, depth), estimate_step_cost(seq, 1, p, depth));
  std::optional<std::size_t> crossover;
  for (std::size_t b = 1; b <= 32 && !crossover; ++b) {
    if (estimate_step_cost(seq, b, p, depth) < estimate_step_cost(par, b, p, depth)) crossover = b;
  }
  ASSERT_TRUE(crossover);
  EXPECT_GT(*crossover, 2u);
}

TEST(ChooseMode, Examples) {
  EXPECT_EQ(choose_mode(1, 2), DecodeMode::kParallel);
  EXPECT_EQ(choose_mode(2, 2), DecodeMode::kParallel);
  EXPECT_EQ(choose_mode(3, 2), DecodeMode::kSequential);
  EXPECT_EQ(choose_mode(16, 2), DecodeMode::kSequential);
  EXPECT_EQ(choose_mode(1, 1), DecodeMode::kParallel);
  EXPECT_THROW(choose_mode(1, 0), std::invalid_argument);
  EXPECT_EQ(RunConfig{}.threshold, 2u);
  EXPECT_EQ(parse_policy("auto"), ModePolicy::kAuto);
  EXPECT_THROW(parse_policy("fast"), std::invalid_argument);
}

std::vector<std::vector<int>> prompts(std::size_t n) {
  std::vector<std::vector<int>> p;
  for (std::size_t i = 0; i < n; ++i) p.push_back({static_cast<int>(i % 5), static_cast<int>((i * 3) % 5)});
  return p;
}

std::vector<std::uint64_t> ids(std::size_t first, std::size_t n) {
  std::vector<std::uint64_t> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = first + i;
  return v;
}

TEST(RunBatch, PerfectDrafterSpeedsUpSingleStream) {
  const Model m = testing::perfect_drafter_model(tiny_config(3, 1, 7, 5), 1);
  RunConfig rc;
  rc.engine.max_new_tokens = 41;
  rc.engine.theta = 0.0;
  const auto p = prompts(1);
  const RunReport r = run_batch(m, p, ids(0, 1), rc);
  EXPECT_EQ(r.mode, DecodeMode::kParallel);
  EXPECT_DOUBLE_EQ(r.streams[0].tau, 5.0);
  EXPECT_GT(r.streams[0].est_speedup, 1.0);
  EXPECT_NEAR(r.streams[0].est_speedup, 5.0, 1e-12);
}

TEST(RunBatch, NeverMatchingDrafterIsPureOverhead) {
  const Model m = testing::never_matching_model(tiny_config(3, 1, 7, 5), 1);
  RunConfig rc;
  rc.policy = ModePolicy::kParallel;
  rc.engine.max_new_tokens = 20;
  const auto p = prompts(2);
  const RunReport r = run_batch(m, p, ids(0, 2), rc);
  for (const auto& s : r.streams) {
    EXPECT_DOUBLE_EQ(s.tau, 1.0);
    EXPECT_LE(s.est_speedup, 1.0);
  }
  // Forcing a large batch into the compute-bound regime makes it strictly worse.
  rc.profile.saturation = 0.0;
  const RunReport worse = run_batch(m, p, ids(0, 2), rc);
  EXPECT_LT(worse.streams[0].est_speedup, 1.0);
}

TEST(RunBatch, SplitBatchesGiveIdenticalTexts) {
  const Model m = testing::random_model(tiny_config(2, 1, 9, 4), 3);
  RunConfig rc;
  rc.policy = ModePolicy::kSequential;
  rc.engine.temperature = 1.0;
  rc.engine.max_new_tokens = 15;
  rc.engine.seed = 77;
  const auto all = prompts(4);
  const RunReport whole = run_batch(m, all, ids(0, 4), rc);
  const std::vector<std::vector<int>> a(all.begin(), all.begin() + 2), b(all.begin() + 2, all.end());
  const RunReport first = run_batch(m, a, ids(0, 2), rc), second = run_batch(m, b, ids(2, 2), rc);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_EQ(whole.streams[i].output, first.streams[i].output);
    EXPECT_EQ(whole.streams[2 + i].output, second.streams[i].output);
  }
}

TEST(RunBatch, AutoModeSwitchesAtThresholdWithoutChangingGreedyOutput) {
  const Model m = testing::random_model(tiny_config(2, 1, 9, 4), 4, 2.0);
  RunConfig rc;
  rc.engine.max_new_tokens = 12;
  const auto all = prompts(4);
  const RunReport big = run_batch(m, all, ids(0, 4), rc);
  EXPECT_EQ(big.mode, DecodeMode::kSequential);
  for (std::size_t i = 0; i < 4; i += 2) {
    const std::vector<std::vector<int>> pair(all.begin() + static_cast<std::ptrdiff_t>(i),
                                             all.begin() + static_cast<std::ptrdiff_t>(i + 2));
    const RunReport small = run_batch(m, pair, ids(i, 2), rc);
    EXPECT_EQ(small.mode, DecodeMode::kParallel);
    EXPECT_EQ(small.streams[0].output, big.streams[i].output);
    EXPECT_EQ(small.streams[1].output, big.streams[i + 1].output);
  }
}

TEST(RunBatch, ReportIsSortedAndConsistent) {
  const Model m = testing::random_model(tiny_config(2, 1, 9, 3), 5);
  RunConfig rc;
  rc.engine.max_new_tokens = 10;
  rc.engine.temperature = 0.7;
  const auto p = prompts(3);
  const std::vector<std::uint64_t> rev{9, 4, 6};
  const RunReport r = run_batch(m, p, rev, rc);
  ASSERT_EQ(r.streams.size(), 3u);
  EXPECT_EQ(r.streams[0].stream_id, 4u);
  EXPECT_EQ(r.streams[2].stream_id, 9u);
  for (const auto& s : r.streams) {
    EXPECT_EQ(s.tokens + 1, s.output.size());
    std::size_t full = 0;
    for (const auto& st : s.trace) full += st.rows_full;
    EXPECT_EQ(full, s.rows_full);
    const auto j = s.to_json();
    for (const char* k : {"stream_id", "steps", "tokens", "tau", "rows_full", "rows_partial", "est_cost",
                          "est_speedup", "mode", "fallbacks"}) {
      EXPECT_TRUE(j.contains(k)) << k;
    }
  }
  EXPECT_THROW(run_batch(m, std::span<const std::vector<int>>{}, std::span<const std::uint64_t>{}, rc),
               std::invalid_argument);
}

}  // namespace
}  // namespace blockspec
