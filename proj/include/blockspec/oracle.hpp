// Copyright 2026 The blockspec Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <functional>
#include <iterator>
#include <map>
#include <numbers>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "blockspec/engine.hpp"
#include "blockspec/layout.hpp"
#include "blockspec/model.hpp"
#include "blockspec/sampler.hpp"
#include "blockspec/trainer.hpp"
#include "json.hpp"

namespace blockspec {

/// Outcome of one executable losslessness or correctness check.
struct CheckResult {
  std::string name;
  bool pass = false;
  double measured = 0.0;
  double threshold = 0.0;
  double seconds = 0.0;
  std::string detail;

  std::string line() const {
    std::ostringstream os;
    os << (pass ? "PASS " : "FAIL ") << name << " measured=" << measured << " threshold=" << threshold
       << " time=" << seconds << "s";
    if (!detail.empty()) os << " (" << detail << ")";
    return os.str();
  }

  nlohmann::json to_json() const {
    return {{"check", name},         {"pass", pass},       {"measured", measured},
            {"threshold", threshold}, {"seconds", seconds}, {"detail", detail}};
  }
};

namespace detail {

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

/// Random distribution with some exact zeros, never all-zero.
inline Categorical random_categorical(std::size_t n, std::mt19937_64& rng, double zero_rate) {
  std::exponential_distribution<double> ex(1.0);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> w(n);
  double s = 0.0;
  for (auto& x : w) {
    x = u(rng) < zero_rate ? 0.0 : ex(rng);
    s += x;
  }
  if (s == 0.0) {
    w[std::uniform_int_distribution<std::size_t>(0, n - 1)(rng)] = 1.0;
    s = 1.0;
  }
  for (auto& x : w) x /= s;
  return {w};
}

}  // namespace detail

/// Worst one-step committed-marginal error over random (p, q) pairs.
inline CheckResult check_marginal_identity(std::size_t pairs, std::size_t vocab, std::uint64_t seed,
                                           double tol = 1e-12) {
  detail::Stopwatch sw;
  std::mt19937_64 rng(seed);
  double worst = 0.0;
  for (std::size_t i = 0; i < pairs; ++i) {
    const Categorical p = detail::random_categorical(vocab, rng, i % 3 == 0 ? 0.3 : 0.0);
    const Categorical q = i % 17 == 0 ? p : detail::random_categorical(vocab, rng, i % 2 == 0 ? 0.3 : 0.0);
    worst = std::max(worst, committed_marginal_identity(p, q));
  }
  CheckResult r{"marginal_identity", worst < tol, worst, tol, sw.seconds(), ""};
  r.detail = std::to_string(pairs) + " pairs, |V|=" + std::to_string(vocab);
  return r;
}

/// Exact distribution of the next `horizon` tokens under plain sampling at
/// temperature T, by enumeration with from-scratch forwards.
inline std::map<std::vector<int>, double> enumerate_ar_distribution(const Model& model, std::span<const int> prompt,
                                                                    std::size_t horizon, double temperature) {
  std::map<std::vector<int>, double> out;
  std::function<void(std::vector<int>&, std::vector<int>&, double)> rec = [&](std::vector<int>& ctx,
                                                                             std::vector<int>& cont, double pr) {
    if (cont.size() == horizon) {
      out[cont] += pr;
      return;
    }
    const Matrix logits = causal_logits(model, ctx);
    const Categorical dist = apply_temperature(logits.row(logits.rows - 1), temperature);
    for (std::size_t v = 0; v < dist.size(); ++v) {
      if (dist[v] <= 0.0) continue;
      ctx.push_back(static_cast<int>(v));
      cont.push_back(static_cast<int>(v));
      rec(ctx, cont, pr * dist[v]);
      ctx.pop_back();
      cont.pop_back();
    }
  };
  std::vector<int> ctx(prompt.begin(), prompt.end()), cont;
  rec(ctx, cont, 1.0);
  return out;
}

/// Small peaked target with a fully random drafter (nonzero calibration), the
/// fixture of the sequence-level sampling test.
inline Model tv_fixture_model(std::uint64_t seed) {
  Model m;
  m.config.n_layers = 2;
  m.config.n_draft_layers = 1;
  m.config.d_model = 16;
  m.config.n_heads = 2;
  m.config.d_ff = 32;
  m.config.vocab_size = 8;
  m.config.block_slots = 3;
  m.config.calib_hidden = 16;
  m.frozen = init_frozen(m.config, seed, 4.0);
  m.draft = init_random_draft(m.config, seed + 1);
  return m;
}

/// Total-variation distance between committed continuations of speculative
/// decoding and the enumerated autoregressive distribution.
inline CheckResult check_sequence_tv(const Model& model, DecodeMode mode, std::span<const int> prompt,
                                     std::size_t horizon, std::size_t decodes, double temperature, double theta,
                                     std::uint64_t seed, double tol = 0.02) {
  detail::Stopwatch sw;
  const auto exact = enumerate_ar_distribution(model, prompt, horizon, temperature);
  EngineConfig ec;
  ec.mode = mode;
  ec.temperature = temperature;
  ec.theta = theta;
  ec.max_new_tokens = horizon;
  ec.seed = seed;
  const Engine engine(model, ec);
  std::map<std::vector<int>, std::size_t> counts;
  std::size_t fallbacks = 0, steps = 0;
  for (std::size_t i = 0; i < decodes; ++i) {
    StreamState st = engine.prefill(i, prompt);
    while (!st.finished) {
      fallbacks += engine.step(st).fallback ? 1 : 0;
      ++steps;
    }
    ++counts[std::vector<int>(st.generated().begin(), st.generated().end())];
  }
  double tv = 0.0, null_tv = 0.0;
  for (const auto& [seq, p] : exact) {
    auto it = counts.find(seq);
    const double emp = it == counts.end() ? 0.0 : static_cast<double>(it->second) / static_cast<double>(decodes);
    tv += std::abs(emp - p);
    null_tv += std::sqrt(2.0 * p * (1.0 - p) / (std::numbers::pi * static_cast<double>(decodes)));
  }
  for (const auto& [seq, c] : counts) {
    if (!exact.count(seq)) tv += static_cast<double>(c) / static_cast<double>(decodes);
  }
  tv *= 0.5;
  CheckResult r{std::string("sequence_tv_") + to_string(mode), tv < tol, tv, tol, sw.seconds(), ""};
  std::ostringstream os;
  os << decodes << " decodes, horizon " << horizon << ", expected sampling-noise TV ~" << 0.5 * null_tv << ", "
     << steps << " steps, " << fallbacks << " fallbacks";
  r.detail = os.str();
  return r;
}

/// Plain greedy continuation with a from-scratch forward per token.
inline std::vector<int> greedy_reference(const Model& model, std::span<const int> prompt, std::size_t n) {
  std::vector<int> ctx(prompt.begin(), prompt.end()), out;
  for (std::size_t i = 0; i < n; ++i) {
    const Matrix logits = causal_logits(model, ctx);
    const int t = static_cast<int>(argmax_tiebreak_low(logits.row(logits.rows - 1)));
    ctx.push_back(t);
    out.push_back(t);
  }
  return out;
}

/// T = 0 decoding in both modes and every theta must reproduce greedy
/// autoregressive output token for token.
inline CheckResult check_greedy_exact(const Model& model, std::size_t prompts, std::span<const double> thetas,
                                      std::size_t max_tokens, std::uint64_t seed) {
  detail::Stopwatch sw;
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> tok(0, model.config.vocab_size - 1);
  std::uniform_int_distribution<std::size_t> len(1, 8);
  std::size_t mismatches = 0, runs = 0, fallbacks = 0;
  for (std::size_t i = 0; i < prompts; ++i) {
    std::vector<int> prompt(len(rng));
    for (int& t : prompt) t = tok(rng);
    const auto ref = greedy_reference(model, prompt, max_tokens);
    for (DecodeMode mode : {DecodeMode::kParallel, DecodeMode::kSequential}) {
      for (double theta : thetas) {
        EngineConfig ec;
        ec.mode = mode;
        ec.theta = theta;
        ec.max_new_tokens = max_tokens;
        ec.seed = seed;
        const Engine engine(model, ec);
        StreamState st = engine.prefill(i, prompt);
        for (const auto& s : engine.run(st)) fallbacks += s.fallback ? 1 : 0;
        ++runs;
        if (!std::equal(ref.begin(), ref.end(), st.generated().begin(), st.generated().end())) ++mismatches;
      }
    }
  }
  CheckResult r{"greedy_exact", mismatches == 0, static_cast<double>(mismatches), 0.0, sw.seconds(), ""};
  r.detail = std::to_string(runs) + " runs, " + std::to_string(fallbacks) + " fallback steps";
  return r;
}

namespace detail {

inline bool rows_identical(const Matrix& a, std::size_t ra, const Matrix& b, std::size_t rb) {
  return a.cols == b.cols && std::memcmp(a.row(ra).data(), b.row(rb).data(), a.cols * sizeof(double)) == 0;
}

inline ModelConfig random_small_config(std::mt19937_64& rng) {
  ModelConfig c;
  c.n_layers = std::uniform_int_distribution<int>(1, 4)(rng);
  c.n_draft_layers = std::uniform_int_distribution<int>(1, c.n_layers)(rng);
  c.n_heads = std::uniform_int_distribution<int>(1, 2)(rng);
  c.d_model = c.n_heads * 2 * std::uniform_int_distribution<int>(2, 4)(rng);
  c.d_ff = 2 * c.d_model;
  c.vocab_size = std::uniform_int_distribution<int>(5, 16)(rng);
  c.block_slots = std::uniform_int_distribution<int>(2, 5)(rng);
  c.calib_hidden = 8;
  return c;
}

}  // namespace detail

/// Prefix isolation (mask blocks never change clean rows) and block isolation
/// (perturbing one block's mask inputs never changes another block), bitwise.
inline CheckResult check_isolation(std::size_t configs, std::uint64_t seed) {
  detail::Stopwatch sw;
  std::mt19937_64 rng(seed);
  std::size_t failures = 0;
  for (std::size_t c = 0; c < configs; ++c) {
    Model m;
    m.config = detail::random_small_config(rng);
    m.frozen = init_frozen(m.config, rng());
    m.draft = init_random_draft(m.config, rng());
    const auto M = static_cast<std::size_t>(m.config.block_slots);
    const std::size_t T = M + 2 + std::uniform_int_distribution<std::size_t>(0, 10)(rng);
    std::vector<int> seq(T);
    for (int& t : seq) t = std::uniform_int_distribution<int>(0, m.config.vocab_size - 1)(rng);

    KVStore kv0 = m.make_kv();
    const ForwardOutput clean = forward(m, kv0, build_causal_layout(0, T), seq);

    std::vector<std::size_t> valid(T - M);
    std::iota(valid.begin(), valid.end(), std::size_t{0});
    std::vector<std::size_t> anchors;
    std::sample(valid.begin(), valid.end(), std::back_inserter(anchors),
                std::min<std::size_t>(valid.size(), 1 + rng() % 4), rng);
    const AttentionLayout lay = build_training_layout(T, anchors, M);
    KVStore kv1 = m.make_kv();
    const ForwardOutput packed = forward(m, kv1, lay, seq);
    for (std::size_t i = 0; i < T; ++i) {
      if (!detail::rows_identical(clean.hidden, i, packed.hidden, i)) ++failures;
    }
    if (!(kv0 == kv1)) ++failures;

    // Perturb the mask inputs of the first block only.
    std::size_t nm = 0;
    for (std::size_t i = 0; i < lay.size(); ++i) nm += lay.is_mask(i) ? 1 : 0;
    Matrix init(nm, static_cast<std::size_t>(m.config.d_model));
    for (std::size_t r = 0; r < nm; ++r) std::copy(m.draft.mask_embed.data.begin(), m.draft.mask_embed.data.end(), init.row(r).begin());
    for (std::size_t r = 0; r < M; ++r) {
      for (double& x : init.row(r)) x += 0.5;
    }
    KVStore kv2 = m.make_kv();
    ForwardOptions opts;
    opts.mask_init = &init;
    const ForwardOutput perturbed = forward(m, kv2, lay, seq, opts);
    const auto target_rows = lay.block_rows(static_cast<int>(anchors[0]));
    bool target_changed = false;
    for (std::size_t i = 0; i < lay.size(); ++i) {
      const bool in_target = std::find(target_rows.begin(), target_rows.end(), i) != target_rows.end();
      const bool same = detail::rows_identical(packed.hidden, i, perturbed.hidden, i);
      if (in_target) target_changed = target_changed || !same;
      if (!in_target && !same) ++failures;
    }
    if (!target_changed) ++failures;
  }
  CheckResult r{"prefix_block_isolation", failures == 0, static_cast<double>(failures), 0.0, sw.seconds(), ""};
  r.detail = std::to_string(configs) + " random configurations";
  return r;
}

/// Draft logits produced with cache reuse and rollbacks must equal a
/// from-scratch recomputation over the committed tokens.
inline CheckResult check_kv_reuse(const Model& model, DecodeMode mode, std::size_t steps, double temperature,
                                  std::uint64_t seed, double tol = 1e-12) {
  detail::Stopwatch sw;
  const auto M = static_cast<std::size_t>(model.config.block_slots);
  EngineConfig ec;
  ec.mode = mode;
  ec.temperature = temperature;
  ec.max_new_tokens = steps * (M + 1) + 1;
  ec.seed = seed;
  const Engine engine(model, ec);
  std::mt19937_64 rng(seed);
  std::vector<int> prompt(4);
  for (int& t : prompt) t = std::uniform_int_distribution<int>(0, model.config.vocab_size - 1)(rng);
  StreamState st = engine.prefill(0, prompt);
  double worst = 0.0;
  std::size_t done = 0, rollbacks = 0, compared = 0;
  while (!st.finished && done < steps) {
    const StepStats s = engine.step(st);
    ++done;
    if (s.accepted < (mode == DecodeMode::kParallel ? M - 1 : M)) ++rollbacks;
    if (st.finished || !st.pending) continue;
    const std::size_t m = st.tokens.size();
    // Sequential drafts see every committed token; parallel drafts see all but
    // the newest bonus, whose position slot 0 occupies.
    const std::size_t visible = mode == DecodeMode::kSequential ? m : m - 1;
    KVStore kv = model.make_kv();
    const AttentionLayout lay = build_draft_layout(0, visible, M);
    const ForwardOutput ref = forward(model, kv, lay, std::span<const int>(st.tokens.data(), visible));
    const auto rows = lay.block_rows(0);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      for (std::size_t v = 0; v < ref.logits.cols; ++v) {
        worst = std::max(worst, std::abs(ref.logits(rows[i], v) - st.last_draft_logits(i, v)));
      }
    }
    if (mode == DecodeMode::kSequential) {
      for (std::size_t v = 0; v < ref.logits.cols; ++v) {
        worst = std::max(worst, std::abs(ref.logits(visible - 1, v) - st.bonus_logits[v]));
      }
    }
    ++compared;
  }
  CheckResult r{std::string("kv_reuse_") + to_string(mode), worst <= tol && compared > 0, worst, tol, sw.seconds(),
                ""};
  r.detail = std::to_string(done) + " steps, " + std::to_string(rollbacks) + " rollbacks, " +
             std::to_string(compared) + " draft passes compared";
  return r;
}

/// The configuration used for gradient checking.
inline ModelConfig gradient_check_config() {
  ModelConfig c;
  c.n_layers = 4;
  c.n_draft_layers = 2;
  c.d_model = 16;
  c.n_heads = 2;
  c.d_ff = 32;
  c.vocab_size = 32;
  c.block_slots = 3;
  c.calib_hidden = 16;
  return c;
}

/// Every drafter scalar: |analytic - central difference| / max(1, |analytic|).
inline CheckResult check_gradients(std::size_t seeds, std::uint64_t seed, double tol = 1e-5) {
  detail::Stopwatch sw;
  double worst = 0.0;
  std::size_t scalars = 0;
  for (std::size_t s = 0; s < seeds; ++s) {
    std::mt19937_64 rng(seed + s);
    Model m;
    m.config = gradient_check_config();
    m.frozen = init_frozen(m.config, rng());
    m.draft = init_random_draft(m.config, rng());
    TrainConfig tc;
    tc.lambda = 0.5;  // keeps every slot's contribution visible to the check
    tc.calib_lambda = 0.25;
    std::vector<std::vector<int>> seqs(2, std::vector<int>(9));
    for (auto& q : seqs) {
      for (int& t : q) t = std::uniform_int_distribution<int>(0, m.config.vocab_size - 1)(rng);
    }
    std::vector<std::vector<std::size_t>> anchors{{0, 3, 5}, {2, 4}};
    const BatchGradients bg = compute_gradients(m, seqs, anchors, tc);

    std::vector<Matrix*> params, grads;
    m.draft.for_each([&](const std::string&, Matrix& x) { params.push_back(&x); });
    BatchGradients copy = bg;
    copy.grads.for_each([&](const std::string&, Matrix& x) { grads.push_back(&x); });
    for (std::size_t t = 0; t < params.size(); ++t) {
      for (std::size_t j = 0; j < params[t]->data.size(); ++j) {
        double& theta = params[t]->data[j];
        const double saved = theta;
        const double h = 1e-5 * std::max(1.0, std::abs(saved));
        theta = saved + h;
        const double up = evaluate_batch(m, seqs, anchors, tc).total(tc.calib_weight);
        theta = saved - h;
        const double down = evaluate_batch(m, seqs, anchors, tc).total(tc.calib_weight);
        theta = saved;
        const double fd = (up - down) / (2.0 * h);
        const double a = grads[t]->data[j];
        worst = std::max(worst, std::abs(a - fd) / std::max(1.0, std::abs(a)));
        ++scalars;
      }
    }
  }
  CheckResult r{"gradient_check", worst < tol, worst, tol, sw.seconds(), ""};
  r.detail = std::to_string(scalars) + " scalars over " + std::to_string(seeds) + " seeds";
  return r;
}

/// Every parallel step's main forward has 1 + (M-1) + |kept| M rows.
inline CheckResult check_token_accounting(const Model& model, std::size_t streams, std::span<const double> thetas,
                                          std::size_t max_tokens, std::uint64_t seed) {
  detail::Stopwatch sw;
  const auto M = static_cast<std::size_t>(model.config.block_slots);
  std::mt19937_64 rng(seed);
  std::size_t bad = 0, checked = 0;
  for (double theta : thetas) {
    EngineConfig ec;
    ec.theta = theta;
    ec.temperature = 1.0;
    ec.max_new_tokens = max_tokens;
    ec.seed = seed;
    const Engine engine(model, ec);
    for (std::size_t i = 0; i < streams; ++i) {
      std::vector<int> prompt{std::uniform_int_distribution<int>(0, model.config.vocab_size - 1)(rng)};
      StreamState st = engine.prefill(i, prompt);
      for (const auto& s : engine.run(st)) {
        ++checked;
        if (s.main_forward_rows != 1 + (M - 1) + s.kept.size() * M) ++bad;
      }
    }
  }
  CheckResult r{"token_accounting", bad == 0 && checked > 0, static_cast<double>(bad), 0.0, sw.seconds(), ""};
  r.detail = std::to_string(checked) + " parallel steps";
  return r;
}

}  // namespace blockspec
