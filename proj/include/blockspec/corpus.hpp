// Copyright 2026 The blockspec Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <istream>
#include <iterator>
#include <ostream>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

namespace blockspec {

struct CorpusSpec {
  int vocab_size = 64;
  std::uint64_t seed = 0;
  std::size_t sequences = 512;
  std::size_t length = 48;
  std::size_t branching = 3;  // successors per two-token context

  void validate() const {
    if (vocab_size < 2) throw std::invalid_argument("CorpusSpec: vocab_size must be >= 2");
    if (length < 2) throw std::invalid_argument("CorpusSpec: length must be >= 2");
    if (branching < 1 || branching > static_cast<std::size_t>(vocab_size)) {
      throw std::invalid_argument("CorpusSpec: branching must be in [1, vocab_size]");
    }
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(CorpusSpec, vocab_size, seed, sequences, length, branching)

/// Sparse order-2 Markov chain: every context (a, b) has `branching` random
/// successors with Dirichlet(1/2) weights.
class MarkovSource {
 public:
  MarkovSource(int vocab_size, std::uint64_t seed, std::size_t branching)
      : vocab_(static_cast<std::size_t>(vocab_size)), table_(vocab_ * vocab_ * vocab_, 0.0) {
    std::mt19937_64 rng(seed);
    std::gamma_distribution<double> gamma(0.5, 1.0);
    std::vector<std::size_t> ids(vocab_);
    for (std::size_t i = 0; i < vocab_; ++i) ids[i] = i;
    for (std::size_t ctx = 0; ctx < vocab_ * vocab_; ++ctx) {
      std::vector<std::size_t> succ;
      std::sample(ids.begin(), ids.end(), std::back_inserter(succ), branching, rng);
      double total = 0.0;
      std::vector<double> w;
      for (std::size_t i = 0; i < succ.size(); ++i) {
        w.push_back(gamma(rng) + 1e-3);
        total += w.back();
      }
      for (std::size_t i = 0; i < succ.size(); ++i) table_[ctx * vocab_ + succ[i]] = w[i] / total;
    }
  }

  std::size_t vocab_size() const { return vocab_; }

  double prob(int a, int b, int c) const {
    return table_[(static_cast<std::size_t>(a) * vocab_ + static_cast<std::size_t>(b)) * vocab_ +
                  static_cast<std::size_t>(c)];
  }

  /// First two tokens uniform, then the chain.
  std::vector<int> sample(std::size_t length, std::mt19937_64& rng) const {
    std::uniform_int_distribution<int> first(0, static_cast<int>(vocab_) - 1);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    std::vector<int> seq;
    for (std::size_t i = 0; i < length; ++i) {
      if (i < 2) {
        seq.push_back(first(rng));
        continue;
      }
      const double u = unif(rng);
      double acc = 0.0;
      int pick = -1;
      for (std::size_t c = 0; c < vocab_; ++c) {
        const double p = prob(seq[i - 2], seq[i - 1], static_cast<int>(c));
        if (p <= 0.0) continue;
        pick = static_cast<int>(c);
        acc += p;
        if (u < acc) break;
      }
      seq.push_back(pick);
    }
    return seq;
  }

 private:
  std::size_t vocab_;
  std::vector<double> table_;
};

inline MarkovSource markov_source(const CorpusSpec& spec) {
  spec.validate();
  return MarkovSource(spec.vocab_size, spec.seed, spec.branching);
}

inline std::vector<std::vector<int>> generate_corpus(const CorpusSpec& spec) {
  const MarkovSource src = markov_source(spec);
  std::mt19937_64 rng(spec.seed ^ 0x5eedc0de5eedc0deULL);
  std::vector<std::vector<int>> out;
  out.reserve(spec.sequences);
  for (std::size_t i = 0; i < spec.sequences; ++i) out.push_back(src.sample(spec.length, rng));
  return out;
}

inline void write_corpus(std::ostream& os, const CorpusSpec& spec, const std::vector<std::vector<int>>& seqs) {
  os << "# blockspec corpus " << nlohmann::json(spec).dump() << '\n';
  for (const auto& s : seqs) {
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? " " : "") << s[i];
    os << '\n';
  }
}

/// Reads one sequence per line; '#' lines and blank lines are skipped. Token
/// ids must lie in [0, vocab_size) when vocab_size > 0.
inline std::vector<std::vector<int>> read_corpus(std::istream& is, int vocab_size = 0) {
  std::vector<std::vector<int>> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ss(line);
    std::vector<int> seq;
    std::string tok;
    while (ss >> tok) {
      std::size_t used = 0;
      long v = 0;
      try {
        v = std::stol(tok, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used != tok.size() || v < 0 || (vocab_size > 0 && v >= vocab_size)) {
        throw std::runtime_error("corpus line " + std::to_string(lineno) + ": bad token '" + tok + "'");
      }
      seq.push_back(static_cast<int>(v));
    }
    if (!seq.empty()) out.push_back(std::move(seq));
  }
  return out;
}

}  // namespace blockspec
