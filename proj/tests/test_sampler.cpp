// Copyright 2026 The blockspec Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <bit>
#include <cmath>
#include <map>
#include <random>

#include "blockspec/oracle.hpp"
#include "blockspec/rng.hpp"
#include "blockspec/sampler.hpp"

namespace blockspec {
namespace {

double entropy(const Categorical& c) {
  double h = 0.0;
  for (double p : c.probs)
    if (p > 0) h -= p * std::log(p);
  return h;
}

TEST(Temperature, Examples) {
  const std::vector<double> zero{0.0, 0.0};
  const Categorical half = apply_temperature(zero, 1.0);
  EXPECT_EQ(half[0], 0.5);
  EXPECT_EQ(half[1], 0.5);

  const std::vector<double> tie{1.0, 3.0, 3.0};
  const Categorical g = apply_temperature(tie, 0.0);
  EXPECT_EQ(g.probs, (std::vector<double>{0.0, 1.0, 0.0}));

  std::mt19937_64 rng(1);
  std::normal_distribution<double> n(0.0, 2.0);
  for (int t = 0; t < 20; ++t) {
    std::vector<double> l(10);
    for (double& x : l) x = n(rng);
    const Categorical p1 = apply_temperature(l, 1.0), p05 = apply_temperature(l, 0.5);
    EXPECT_LT(entropy(p05), entropy(p1));
    p1.validate();
    // Direct formula.
    double z = 0.0;
    for (double x : l) z += std::exp(x / 0.5);
    for (std::size_t i = 0; i < l.size(); ++i) EXPECT_NEAR(p05[i], std::exp(l[i] / 0.5) / z, 1e-14);
  }
  EXPECT_THROW(apply_temperature(zero, -1.0), std::invalid_argument);
}

TEST(Residual, Examples) {
  const Categorical r = residual({{0.5, 0.5}}, {{0.8, 0.2}});
  EXPECT_EQ(r.probs, (std::vector<double>{0.0, 1.0}));
  const Categorical r3 = residual({{0.6, 0.3, 0.1}}, {{0.2, 0.5, 0.3}});
  EXPECT_EQ(r3.probs, (std::vector<double>{1.0, 0.0, 0.0}));
  EXPECT_THROW(residual({{0.3, 0.7}}, {{0.3, 0.7}}), std::domain_error);
  EXPECT_THROW(residual({{1.0}}, {{0.5, 0.5}}), std::invalid_argument);
}

TEST(Categorical, Validate) {
  EXPECT_NO_THROW(Categorical({{0.25, 0.75}}).validate());
  EXPECT_THROW(Categorical({{0.5, 0.6}}).validate(), std::invalid_argument);
  EXPECT_THROW(Categorical({{-0.1, 1.1}}).validate(), std::invalid_argument);
}

TEST(SampleIndex, InverseCdfAndZeroMassNeverReturned) {
  const Categorical c{{0.0, 0.25, 0.0, 0.75, 0.0}};
  EXPECT_EQ(sample_index(c, 0.0), 1);
  EXPECT_EQ(sample_index(c, 0.2499), 1);
  EXPECT_EQ(sample_index(c, 0.25), 3);
  EXPECT_EQ(sample_index(c, std::nextafter(1.0, 0.0)), 3);
}

TEST(SpeculativeVerify, EqualDistributionsAcceptEverything) {
  std::mt19937_64 rng(2);
  for (int t = 0; t < 200; ++t) {
    std::vector<Categorical> p;
    for (int i = 0; i < 4; ++i) p.push_back(detail::random_categorical(6, rng, 0.2));
    std::vector<int> drafts;
    const RngStream s(3, static_cast<std::uint64_t>(t), 0);
    for (int i = 0; i < 3; ++i) drafts.push_back(sample_index(p[static_cast<std::size_t>(i)], s.uniform(i, Purpose::kDraft)));
    const VerifyOutcome o = speculative_verify(p, drafts, std::span(p).first(3), s, 0);
    EXPECT_EQ(o.accepted, 3u);
    EXPECT_EQ(o.committed.size(), 4u);
    EXPECT_GT(p[3][static_cast<std::size_t>(o.bonus)], 0.0);
  }
}

TEST(SpeculativeVerify, HandCaseKOne) {
  const std::vector<Categorical> targets{{{0.5, 0.5}}, {{0.9, 0.1}}};
  const std::vector<Categorical> q{{{1.0, 0.0}}};
  const std::vector<int> d{0};
  int accepted = 0, n = 20000;
  for (int t = 0; t < n; ++t) {
    const VerifyOutcome o = speculative_verify(targets, d, q, RngStream(1, static_cast<std::uint64_t>(t), 0), 0);
    if (o.accepted == 1) {
      ++accepted;
    } else {
      EXPECT_EQ(o.bonus, 1);  // rejection forces the residual token
      EXPECT_EQ(o.committed, std::vector<int>{1});
    }
  }
  EXPECT_NEAR(accepted / static_cast<double>(n), 0.5, 4.0 * std::sqrt(0.25 / n));
}

TEST(SpeculativeVerify, PreconditionsAndInvariants) {
  const std::vector<Categorical> targets{{{0.5, 0.5}}, {{0.5, 0.5}}};
  const std::vector<Categorical> q{{{1.0, 0.0}}};
  const std::vector<int> d{1};
  EXPECT_THROW(speculative_verify(targets, d, q, RngStream(0, 0, 0), 0), std::invalid_argument);
  const std::vector<int> two{0, 0};
  EXPECT_THROW(speculative_verify(targets, two, q, RngStream(0, 0, 0), 0), std::invalid_argument);
}

// Exact distribution over committed sequences for drafts sampled from q,
// by walking the acceptance tree.
std::map<std::vector<int>, double> enumerate_outcomes(const std::vector<Categorical>& p,
                                                      const std::vector<Categorical>& q) {
  std::map<std::vector<int>, double> out;
  const std::size_t k = q.size(), V = p[0].size();
  std::function<void(std::size_t, std::vector<int>&, double)> walk = [&](std::size_t i, std::vector<int>& pre,
                                                                         double pr) {
    if (i == k) {
      for (std::size_t v = 0; v < V; ++v) {
        pre.push_back(static_cast<int>(v));
        out[pre] += pr * p[k][v];
        pre.pop_back();
      }
      return;
    }
    double reject = 0.0;
    for (std::size_t d = 0; d < V; ++d) {
      if (q[i][d] == 0.0) continue;
      const double acc = std::min(1.0, p[i][d] / q[i][d]);
      pre.push_back(static_cast<int>(d));
      walk(i + 1, pre, pr * q[i][d] * acc);
      pre.pop_back();
      reject += q[i][d] * (1.0 - acc);
    }
    if (reject <= 0.0) return;
    const Categorical res = residual(p[i], q[i]);
    for (std::size_t v = 0; v < V; ++v) {
      if (res[v] == 0.0) continue;
      pre.push_back(static_cast<int>(v));
      out[pre] += pr * reject * res[v];
      pre.pop_back();
    }
  };
  std::vector<int> pre;
  walk(0, pre, 1.0);
  return out;
}

TEST(SpeculativeVerify, MonteCarloMatchesEnumeratedTree) {
  std::mt19937_64 rng(4);
  const std::vector<Categorical> p{{{0.5, 0.3, 0.2}}, {{0.1, 0.6, 0.3}}, {{0.3, 0.3, 0.4}}};
  const std::vector<Categorical> q{{{0.2, 0.7, 0.1}}, {{0.4, 0.4, 0.2}}};
  const auto exact = enumerate_outcomes(p, q);
  double total = 0.0;
  for (const auto& [s, pr] : exact) total += pr;
  EXPECT_NEAR(total, 1.0, 1e-14);

  const int n = 100000;
  std::map<std::vector<int>, int> counts;
  for (int t = 0; t < n; ++t) {
    const RngStream s(11, static_cast<std::uint64_t>(t), 0);
    std::vector<int> d;
    for (int i = 0; i < 2; ++i) d.push_back(sample_index(q[static_cast<std::size_t>(i)], s.uniform(i, Purpose::kDraft)));
    ++counts[speculative_verify(p, d, q, s, 0).committed];
  }
  int outside = 0;
  for (const auto& [seq, pr] : exact) {
    const double sd = std::sqrt(n * pr * (1 - pr));
    if (std::abs(counts[seq] - n * pr) > 3.0 * sd) ++outside;
  }
  for (const auto& [seq, c] : counts) EXPECT_TRUE(exact.count(seq)) << "impossible outcome observed";
  EXPECT_LE(outside, 1) << "of " << exact.size() << " outcomes";

  // Losslessness of the first committed token, exactly.
  std::vector<double> first(3, 0.0);
  for (const auto& [seq, pr] : exact) first[static_cast<std::size_t>(seq[0])] += pr;
  for (std::size_t v = 0; v < 3; ++v) EXPECT_NEAR(first[v], p[0][v], 1e-15);
}

TEST(GreedyVerify, Examples) {
  const std::vector<Categorical> t{{{0.1, 0.9}}, {{0.8, 0.2}}, {{0.3, 0.7}}};
  EXPECT_EQ(greedy_verify(t, std::vector<int>{1, 0}).accepted, 2u);
  EXPECT_EQ(greedy_verify(t, std::vector<int>{1, 0}).committed, (std::vector<int>{1, 0, 1}));
  const VerifyOutcome first_wrong = greedy_verify(t, std::vector<int>{0, 0});
  EXPECT_EQ(first_wrong.accepted, 0u);
  EXPECT_EQ(first_wrong.bonus, 1);
  EXPECT_EQ(first_wrong.committed, std::vector<int>{1});
}

TEST(GreedyVerify, SpeculativeWithOneHotDistributionsAgrees) {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n(0.0, 1.0);
  for (int t = 0; t < 500; ++t) {
    std::vector<Categorical> targets, q;
    std::vector<int> drafts;
    for (int i = 0; i < 4; ++i) {
      std::vector<double> l(4);
      for (double& x : l) x = n(rng);
      targets.push_back(apply_temperature(l, 0.0));
      if (i < 3) {
        std::vector<double> m(4);
        for (double& x : m) x = n(rng);
        // Half the time copy the target so acceptances happen.
        if (rng() % 2) m = l;
        q.push_back(apply_temperature(m, 0.0));
        drafts.push_back(static_cast<int>(argmax_tiebreak_low(m)));
      }
    }
    const VerifyOutcome a = greedy_verify(targets, drafts);
    const VerifyOutcome b = speculative_verify(targets, drafts, q, RngStream(9, static_cast<std::uint64_t>(t), 1), 0);
    EXPECT_EQ(a.committed, b.committed);
    EXPECT_EQ(a.accepted, b.accepted);
  }
}

TEST(MarginalIdentity, Examples) {
  std::mt19937_64 rng(6);
  for (int t = 0; t < 100; ++t) {
    const Categorical p = detail::random_categorical(16, rng, 0.2);
    EXPECT_EQ(committed_marginal_identity(p, p), 0.0);
    const Categorical q = Categorical::one_hot(16, argmax_tiebreak_low(p.probs));
    EXPECT_LT(committed_marginal_identity(p, q), 1e-12);
  }
  const CheckResult r = check_marginal_identity(10000, 16, 7);
  EXPECT_TRUE(r.pass) << r.line();
}

TEST(RngStream, SameKeySameDrawAndOrderIndependence) {
  const RngStream a(1, 2, 3), b(1, 2, 3);
  const double first = a.uniform(10, Purpose::kAccept);
  for (int i = 0; i < 100; ++i) (void)b.uniform(i, Purpose::kDraft);
  EXPECT_EQ(b.uniform(10, Purpose::kAccept), first);
  EXPECT_NE(a.uniform(10, Purpose::kBonus), first);
  EXPECT_NE(RngStream(1, 3, 3).uniform(10, Purpose::kAccept), first);
  EXPECT_NE(a.at_step(4).uniform(10, Purpose::kAccept), first);
}

TEST(RngStream, MonobitAndFrequencySanity) {
  std::uint64_t ones = 0;
  double sum = 0.0;
  std::vector<int> buckets(16, 0);
  const int n = 1000000;
  for (int i = 0; i < n; ++i) {
    const RngStream s(42, static_cast<std::uint64_t>(i % 1000), static_cast<std::uint64_t>(i / 1000));
    ones += static_cast<std::uint64_t>(std::popcount(s.bits(i % 7, Purpose::kAccept)));
    const double u = s.uniform(3, Purpose::kDraft);
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
    sum += u;
    ++buckets[static_cast<std::size_t>(u * 16)];
  }
  const double bits = 64.0 * n;
  EXPECT_NEAR(static_cast<double>(ones), bits / 2, 4.0 * std::sqrt(bits) / 2);
  EXPECT_NEAR(sum / n, 0.5, 4.0 * std::sqrt(1.0 / 12.0 / n));
  double chi2 = 0.0;
  for (int c : buckets) chi2 += (c - n / 16.0) * (c - n / 16.0) / (n / 16.0);
  EXPECT_LT(chi2, 37.7);  // chi-square(15) 0.999 quantile
}

}  // namespace
}  // namespace blockspec
