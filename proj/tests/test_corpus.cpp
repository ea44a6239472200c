// Copyright 2026 The blockspec Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <sstream>

#include "blockspec/corpus.hpp"

namespace blockspec {
namespace {

CorpusSpec small_spec() {
  CorpusSpec s;
  s.vocab_size = 8;
  s.seed = 5;
  s.sequences = 1000;
  s.length = 100;
  return s;
}

TEST(Corpus, SameSeedSameBytes) {
  const CorpusSpec s = small_spec();
  std::ostringstream a, b;
  write_corpus(a, s, generate_corpus(s));
  write_corpus(b, s, generate_corpus(s));
  EXPECT_EQ(a.str(), b.str());
  CorpusSpec other = s;
  other.seed = 6;
  std::ostringstream c;
  write_corpus(c, other, generate_corpus(other));
  EXPECT_NE(a.str(), c.str());
}

TEST(Corpus, TransitionsMatchSeededChain) {
  const CorpusSpec s = small_spec();
  const auto seqs = generate_corpus(s);
  const MarkovSource src = markov_source(s);
  const std::size_t V = 8;
  std::vector<double> counts(V * V * V, 0.0), ctx(V * V, 0.0);
  std::size_t tokens = 0;
  for (const auto& q : seqs) {
    tokens += q.size();
    for (std::size_t i = 2; i < q.size(); ++i) {
      const std::size_t c = static_cast<std::size_t>(q[i - 2]) * V + static_cast<std::size_t>(q[i - 1]);
      ++ctx[c];
      ++counts[c * V + static_cast<std::size_t>(q[i])];
    }
  }
  EXPECT_GE(tokens, 100000u);
  std::size_t cells = 0, outside = 0;
  for (std::size_t c = 0; c < V * V; ++c) {
    double row = 0.0;
    for (std::size_t n = 0; n < V; ++n) {
      const double p = src.prob(static_cast<int>(c / V), static_cast<int>(c % V), static_cast<int>(n));
      row += p;
      if (p == 0.0) {
        EXPECT_EQ(counts[c * V + n], 0.0);
        continue;
      }
      ++cells;
      const double sd = std::sqrt(ctx[c] * p * (1 - p));
      if (std::abs(counts[c * V + n] - ctx[c] * p) > 3 * sd + 1e-9) ++outside;
    }
    EXPECT_NEAR(row, 1.0, 1e-12);
  }
  EXPECT_LE(static_cast<double>(outside), 0.02 * static_cast<double>(cells) + 1) << outside << " of " << cells;
}

TEST(Corpus, VocabBoundAndShape) {
  const CorpusSpec s = small_spec();
  const auto seqs = generate_corpus(s);
  ASSERT_EQ(seqs.size(), 1000u);
  for (const auto& q : seqs) {
    ASSERT_EQ(q.size(), 100u);
    for (int t : q) {
      ASSERT_GE(t, 0);
      ASSERT_LT(t, 8);
    }
  }
}

TEST(Corpus, RoundTripAndReadErrors) {
  const CorpusSpec s = small_spec();
  const auto seqs = generate_corpus(s);
  std::stringstream io;
  write_corpus(io, s, seqs);
  EXPECT_EQ(read_corpus(io, 8), seqs);

  std::istringstream comments("# header\n\n1 2 3\n# more\n4 5\n");
  EXPECT_EQ(read_corpus(comments), (std::vector<std::vector<int>>{{1, 2, 3}, {4, 5}}));
  std::istringstream bad("1 2 x\n");
  EXPECT_THROW(read_corpus(bad), std::runtime_error);
  std::istringstream neg("1 -2\n");
  EXPECT_THROW(read_corpus(neg), std::runtime_error);
  std::istringstream big("1 9\n");
  EXPECT_THROW(read_corpus(big, 8), std::runtime_error);
  CorpusSpec invalid;
  invalid.branching = 0;
  EXPECT_THROW(generate_corpus(invalid), std::invalid_argument);
}

}  // namespace
}  // namespace blockspec
