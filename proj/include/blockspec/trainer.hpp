// Copyright 2026 The blockspec Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <numeric>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "blockspec/autodiff.hpp"
#include "blockspec/engine.hpp"
#include "blockspec/layout.hpp"
#include "blockspec/model.hpp"
#include "json.hpp"

namespace blockspec {

struct TrainConfig {
  double lambda = 7.0;
  double learning_rate = 1e-3;
  std::size_t steps = 2000;
  std::size_t anchors_per_sequence = 4;
  std::size_t batch_sequences = 8;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double calib_weight = 1.0;
  double calib_lambda = 0.0;  // decay of the calibration loss over slots 1..M-1
  std::uint64_t seed = 0;

  void validate() const {
    if (!(lambda >= 0.0) || !(calib_lambda >= 0.0)) throw std::invalid_argument("TrainConfig: lambda must be >= 0");
    if (!(learning_rate >= 0.0)) throw std::invalid_argument("TrainConfig: learning rate must be >= 0");
    if (anchors_per_sequence < 1 || batch_sequences < 1) {
      throw std::invalid_argument("TrainConfig: need at least one anchor and one sequence");
    }
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0) || !(epsilon > 0.0)) {
      throw std::invalid_argument("TrainConfig: bad Adam moments");
    }
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(TrainConfig, lambda, learning_rate, steps, anchors_per_sequence,
                                                batch_sequences, beta1, beta2, epsilon, calib_weight, calib_lambda, seed)

/// Gradient buffers, one per trainable tensor. The frozen target has none.
using GradStore = DraftWeights;

/// w_i = exp(-lambda (i - 1)), i = 1..M.
inline std::vector<double> decay_weights(std::size_t slots, double lambda) {
  if (slots < 1) throw std::invalid_argument("decay_weights: need M >= 1");
  std::vector<double> w(slots);
  for (std::size_t i = 0; i < slots; ++i) w[i] = std::exp(-lambda * static_cast<double>(i));
  return w;
}

/// -log softmax(logits)[target]
inline double cross_entropy(std::span<const double> logits, int target) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  double s = 0.0;
  for (double l : logits) s += std::exp(l - mx);
  return mx + std::log(s) - logits[static_cast<std::size_t>(target)];
}

/// Decayed block cross entropy of one anchor on raw slot logits (M x |V|).
inline double draft_loss(const Matrix& slot_logits, std::span<const int> targets, double lambda) {
  if (targets.size() != slot_logits.rows) throw std::invalid_argument("draft_loss: one target per slot");
  const auto w = decay_weights(slot_logits.rows, lambda);
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    num += w[i] * cross_entropy(slot_logits.row(i), targets[i]);
    den += w[i];
  }
  return num / den;
}

/// Decayed cross entropy on calibrated logits of slots 1..M-1, with slot 1
/// taking the first weight. `targets` holds all M slot targets.
inline double calib_loss(const Matrix& slot_logits, const Matrix& slot_hidden, std::span<const double> e_b_proxy,
                         std::span<const int> targets, const CalibrationMlp& mlp, double lambda) {
  const std::size_t M = slot_logits.rows;
  if (targets.size() != M || slot_hidden.rows != M) throw std::invalid_argument("calib_loss: one row per slot");
  if (M < 2) return 0.0;
  Matrix cal(M - 1, slot_logits.cols);
  for (std::size_t s = 1; s < M; ++s) {
    const auto c = calibrate(slot_logits.row(s), slot_hidden.row(s), e_b_proxy, mlp);
    std::copy(c.begin(), c.end(), cal.row(s - 1).begin());
  }
  return draft_loss(cal, targets.subspan(1), lambda);
}

/// Uniform anchors without replacement among positions n with n + M < seq_len.
inline std::vector<std::size_t> sample_anchors(std::size_t seq_len, std::size_t slots, std::size_t count,
                                               std::mt19937_64& rng) {
  if (seq_len <= slots) throw std::invalid_argument("sample_anchors: sequence too short for one block");
  std::vector<std::size_t> all(seq_len - slots);
  std::iota(all.begin(), all.end(), std::size_t{0});
  std::vector<std::size_t> out;
  std::sample(all.begin(), all.end(), std::back_inserter(out), std::min(count, all.size()), rng);
  return out;
}

/// Parameters placed on a tape, addressed by checkpoint tensor name.
struct BoundParams {
  std::map<std::string, Tape::Var> vars;

  Tape::Var operator[](const std::string& name) const {
    auto it = vars.find(name);
    if (it == vars.end()) throw std::out_of_range("BoundParams: no tensor '" + name + "'");
    return it->second;
  }
};

inline BoundParams bind(Tape& tape, const Model& model, bool train_frozen, bool train_draft) {
  BoundParams b;
  model.frozen.for_each([&](const std::string& name, const Matrix& m) {
    b.vars[name] = train_frozen ? tape.param(m) : tape.constant(m);
  });
  model.draft.for_each([&](const std::string& name, const Matrix& m) {
    b.vars[name] = train_draft ? tape.param(m) : tape.constant(m);
  });
  return b;
}

/// Final-norm hidden rows of a cache-free forward, split by route.
struct TapedHidden {
  Tape::Var frozen;
  Tape::Var mask;
  std::vector<std::size_t> frozen_rows;  // layout row of each frozen hidden row
  std::vector<std::size_t> mask_rows;    // layout row of each mask hidden row
};

/// Differentiable twin of `forward` for layouts without a cache.
inline TapedHidden taped_forward(Tape& tape, const BoundParams& p, const ModelConfig& cfg,
                                 const AttentionLayout& layout, std::span<const int> tokens) {
  if (layout.cache_len() != 0) throw std::invalid_argument("taped_forward: layouts with a cache are not supported");
  const auto heads = static_cast<std::size_t>(cfg.n_heads);
  const auto first = static_cast<std::size_t>(cfg.first_draft_layer());

  TapedHidden out;
  for (std::size_t i = 0; i < layout.size(); ++i) (layout.is_mask(i) ? out.mask_rows : out.frozen_rows).push_back(i);
  const std::size_t nf = out.frozen_rows.size();
  const std::size_t nm = out.mask_rows.size();
  if (tokens.size() != nf || nf == 0) throw std::invalid_argument("taped_forward: one token per frozen row");

  std::vector<std::size_t> key_of(layout.size());
  for (std::size_t r = 0; r < nf; ++r) {
    if (layout.row(out.frozen_rows[r]).position != static_cast<std::int64_t>(r)) {
      throw std::invalid_argument("taped_forward: frozen rows must be positions 0..F-1");
    }
    key_of[out.frozen_rows[r]] = r;
  }
  for (std::size_t r = 0; r < nm; ++r) key_of[out.mask_rows[r]] = nf + r;
  auto remap = [&](const std::vector<std::size_t>& rows) {
    std::vector<std::vector<std::size_t>> vis;
    for (std::size_t i : rows) {
      auto keys = layout.visible_keys(i);
      for (auto& k : keys) k = key_of[k];
      vis.push_back(std::move(keys));
    }
    return vis;
  };
  const auto vis_f = remap(out.frozen_rows);
  const auto vis_m = remap(out.mask_rows);
  const auto pos_f = detail::gather_positions(layout, out.frozen_rows);
  const auto pos_m = detail::gather_positions(layout, out.mask_rows);

  std::vector<std::size_t> tok_idx;
  for (int t : tokens) {
    if (t < 0 || t >= cfg.vocab_size) throw std::invalid_argument("taped_forward: token out of range");
    tok_idx.push_back(static_cast<std::size_t>(t));
  }
  Tape::Var xf = tape.rows(p["embed"], tok_idx);
  Tape::Var xm{};

  auto ffn = [&](Tape::Var x, const std::string& pre) {
    Tape::Var h = tape.gelu(tape.matmul(tape.rmsnorm(x, p[pre + "ffn_gain"], cfg.norm_eps), p[pre + "w1"]));
    return tape.add(x, tape.matmul(h, p[pre + "w2"]));
  };

  for (std::size_t l = 0; l < static_cast<std::size_t>(cfg.n_layers); ++l) {
    const std::string pre = "layers." + std::to_string(l) + ".";
    const bool mask_active = l >= first && nm > 0;
    if (l == first && nm > 0) xm = tape.broadcast_row(p["draft.mask_embed"], nm);

    Tape::Var af = tape.rmsnorm(xf, p[pre + "attn_gain"], cfg.norm_eps);
    Tape::Var qf = tape.rope(tape.matmul(af, p[pre + "wq"]), pos_f, heads, cfg.rope_base);
    Tape::Var kf = tape.rope(tape.matmul(af, p[pre + "wk"]), pos_f, heads, cfg.rope_base);
    Tape::Var vf = tape.matmul(af, p[pre + "wv"]);
    Tape::Var keys = kf, values = vf;
    Tape::Var qm{};
    std::string dpre;
    if (mask_active) {
      dpre = "draft.layers." + std::to_string(l - first) + ".";
      Tape::Var am = tape.rmsnorm(xm, p[pre + "attn_gain"], cfg.norm_eps);
      qm = tape.rope(tape.matmul(am, p[dpre + "wq"]), pos_m, heads, cfg.rope_base);
      Tape::Var km = tape.rope(tape.matmul(am, p[dpre + "wk"]), pos_m, heads, cfg.rope_base);
      Tape::Var vm = tape.matmul(am, p[dpre + "wv"]);
      keys = tape.concat_rows({kf, km});
      values = tape.concat_rows({vf, vm});
    }
    xf = tape.add(xf, tape.matmul(tape.attention(qf, keys, values, vis_f, heads), p[pre + "wo"]));
    if (mask_active) xm = tape.add(xm, tape.matmul(tape.attention(qm, keys, values, vis_m, heads), p[dpre + "wo"]));
    xf = ffn(xf, pre);
    if (mask_active) xm = ffn(xm, pre);
  }
  out.frozen = tape.rmsnorm(xf, p["final_gain"], cfg.norm_eps);
  if (nm > 0) out.mask = tape.rmsnorm(xm, p["final_gain"], cfg.norm_eps);
  return out;
}

/// Loss terms and diagnostics of one packed batch.
struct BatchLoss {
  double draft = 0.0;  // mean over anchors
  double calib = 0.0;  // mean over anchors
  std::vector<double> draft_per_anchor;
  std::vector<double> calib_per_anchor;
  std::vector<std::size_t> slot_correct;  // raw-logit top-1 hits per slot
  std::size_t anchors = 0;

  double total(double calib_weight) const { return draft + calib_weight * calib; }

  std::vector<double> slot_accuracy() const {
    std::vector<double> a;
    for (std::size_t c : slot_correct) a.push_back(anchors ? static_cast<double>(c) / static_cast<double>(anchors) : 0.0);
    return a;
  }
};

struct BatchGradients {
  BatchLoss loss;
  GradStore grads;
};

namespace detail {

inline void check_batch(std::span<const std::vector<int>> seqs, std::span<const std::vector<std::size_t>> anchors) {
  if (seqs.size() != anchors.size()) throw std::invalid_argument("training batch: one anchor list per sequence");
}

inline std::size_t count_anchors(std::span<const std::vector<std::size_t>> anchors) {
  std::size_t n = 0;
  for (const auto& a : anchors) n += a.size();
  if (n == 0) throw std::invalid_argument("training batch: no anchors");
  return n;
}

}  // namespace detail

/// Loss of a packed batch through the inference path (no tape). This is the
/// reference the tape's gradients are checked against.
inline BatchLoss evaluate_batch(const Model& model, std::span<const std::vector<int>> seqs,
                                std::span<const std::vector<std::size_t>> anchors, const TrainConfig& cfg) {
  detail::check_batch(seqs, anchors);
  const auto M = static_cast<std::size_t>(model.config.block_slots);
  BatchLoss out;
  out.anchors = detail::count_anchors(anchors);
  out.slot_correct.assign(M, 0);
  for (std::size_t s = 0; s < seqs.size(); ++s) {
    if (anchors[s].empty()) continue;
    const auto& seq = seqs[s];
    const AttentionLayout lay = build_training_layout(seq.size(), anchors[s], M);
    KVStore kv = model.make_kv();
    const ForwardOutput fo = forward(model, kv, lay, seq);
    for (std::size_t a = 0; a < anchors[s].size(); ++a) {
      const std::size_t n = anchors[s][a];
      const auto rows = lay.block_rows(static_cast<int>(n));
      const Matrix logits = detail::gather_rows(fo.logits, rows);
      const Matrix hidden = detail::gather_rows(fo.hidden, rows);
      std::span<const int> targets(seq.data() + n + 1, M);
      const double dl = draft_loss(logits, targets, cfg.lambda);
      const double cl = calib_loss(logits, hidden, model.frozen.embed.row(static_cast<std::size_t>(targets[0])),
                                   targets, model.draft.calib, cfg.calib_lambda);
      out.draft_per_anchor.push_back(dl);
      out.calib_per_anchor.push_back(cl);
      out.draft += dl / static_cast<double>(out.anchors);
      out.calib += cl / static_cast<double>(out.anchors);
      for (std::size_t i = 0; i < M; ++i) {
        if (static_cast<int>(argmax_tiebreak_low(logits.row(i))) == targets[i]) ++out.slot_correct[i];
      }
    }
  }
  return out;
}

/// Reverse-mode gradients of draft + calib_weight * calib w.r.t. the drafter.
/// Sequences are reduced into the store in batch order.
inline BatchGradients compute_gradients(const Model& model, std::span<const std::vector<int>> seqs,
                                        std::span<const std::vector<std::size_t>> anchors, const TrainConfig& cfg) {
  detail::check_batch(seqs, anchors);
  const ModelConfig& mc = model.config;
  const auto M = static_cast<std::size_t>(mc.block_slots);
  const auto w = decay_weights(M, cfg.lambda);
  const double wsum = std::accumulate(w.begin(), w.end(), 0.0);
  const auto w_cal = decay_weights(M, cfg.calib_lambda);
  const double wsum_cal = std::accumulate(w_cal.begin(), w_cal.end() - 1, 0.0);

  BatchGradients out;
  out.grads = model.draft.zeros_like();
  BatchLoss& loss = out.loss;
  loss.anchors = detail::count_anchors(anchors);
  loss.slot_correct.assign(M, 0);
  const double inv_a = 1.0 / static_cast<double>(loss.anchors);

  for (std::size_t s = 0; s < seqs.size(); ++s) {
    if (anchors[s].empty()) continue;
    const auto& seq = seqs[s];
    const auto& anc = anchors[s];
    const AttentionLayout lay = build_training_layout(seq.size(), anc, M);
    Tape tape;
    const BoundParams p = bind(tape, model, false, true);
    const TapedHidden th = taped_forward(tape, p, mc, lay, seq);
    Tape::Var logits = tape.matmul(th.mask, p["head"]);

    std::vector<int> tgt, tgt_cal;
    std::vector<double> wt, wt_cal;
    std::vector<std::size_t> cal_rows, bonus_tok;
    for (std::size_t a = 0; a < anc.size(); ++a) {
      for (std::size_t i = 0; i < M; ++i) {
        tgt.push_back(seq[anc[a] + 1 + i]);
        wt.push_back(w[i] / wsum * inv_a);
        if (i == 0) continue;
        cal_rows.push_back(a * M + i);
        bonus_tok.push_back(static_cast<std::size_t>(seq[anc[a] + 1]));
        tgt_cal.push_back(seq[anc[a] + 1 + i]);
        wt_cal.push_back(w_cal[i - 1] / wsum_cal * inv_a * cfg.calib_weight);
      }
    }
    std::vector<Tape::Var> terms{tape.weighted_cross_entropy(logits, tgt, wt)};
    if (M > 1) {
      Tape::Var in = tape.concat_cols(tape.rows(p["embed"], bonus_tok), tape.rows(th.mask, cal_rows));
      Tape::Var z = tape.gelu(tape.add_row(tape.matmul(in, p["calib.u1"]), p["calib.b1"]));
      Tape::Var bias = tape.add_row(tape.matmul(z, p["calib.u2"]), p["calib.b2"]);
      Tape::Var cal = tape.add(tape.rows(logits, cal_rows), bias);
      terms.push_back(tape.weighted_cross_entropy(cal, tgt_cal, wt_cal));
    }
    tape.backward(tape.sum(terms));
    out.grads.for_each([&](const std::string& name, Matrix& g) { add_inplace(g, tape.grad(p[name])); });

    // Per-anchor values straight from the taped activations.
    const Matrix& lv = tape.value(logits);
    const Matrix& hv = tape.value(th.mask);
    for (std::size_t a = 0; a < anc.size(); ++a) {
      std::vector<std::size_t> rows(M);
      std::iota(rows.begin(), rows.end(), a * M);
      const Matrix la = detail::gather_rows(lv, rows);
      const Matrix ha = detail::gather_rows(hv, rows);
      std::span<const int> targets(seq.data() + anc[a] + 1, M);
      const double dl = draft_loss(la, targets, cfg.lambda);
      const double cl = calib_loss(la, ha, model.frozen.embed.row(static_cast<std::size_t>(targets[0])), targets,
                                   model.draft.calib, cfg.calib_lambda);
      loss.draft_per_anchor.push_back(dl);
      loss.calib_per_anchor.push_back(cl);
      loss.draft += dl * inv_a;
      loss.calib += cl * inv_a;
      for (std::size_t i = 0; i < M; ++i) {
        if (static_cast<int>(argmax_tiebreak_low(la.row(i))) == targets[i]) ++loss.slot_correct[i];
      }
    }
  }
  out.grads.for_each([](const std::string& name, const Matrix& g) {
    if (!all_finite(g.data)) throw std::runtime_error("compute_gradients: non-finite gradient in " + name);
  });
  return out;
}

/// First and second Adam moments for a parameter set of type W.
template <typename W>
struct AdamState {
  W m;
  W v;
  std::size_t t = 0;

  static AdamState like(const W& params) {
    AdamState s;
    s.m = params;
    s.m.for_each([](const std::string&, Matrix& x) { std::fill(x.data.begin(), x.data.end(), 0.0); });
    s.v = s.m;
    return s;
  }
};

namespace detail {
template <typename W>
std::vector<Matrix*> tensors_of(W& w) {
  std::vector<Matrix*> out;
  w.for_each([&](const std::string&, Matrix& m) { out.push_back(&m); });
  return out;
}
}  // namespace detail

template <typename W>
void adam_update(W& params, const W& grads, AdamState<W>& state, double lr, double beta1, double beta2,
                 double eps) {
  auto p = detail::tensors_of(params);
  auto g = detail::tensors_of(const_cast<W&>(grads));
  auto m = detail::tensors_of(state.m);
  auto v = detail::tensors_of(state.v);
  if (p.size() != g.size() || p.size() != m.size() || p.size() != v.size()) {
    throw std::invalid_argument("adam_update: parameter/gradient structure mismatch");
  }
  ++state.t;
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (!p[i]->same_shape(*g[i])) throw std::invalid_argument("adam_update: shape mismatch");
    for (std::size_t j = 0; j < p[i]->data.size(); ++j) {
      const double gj = g[i]->data[j];
      double& mj = m[i]->data[j];
      double& vj = v[i]->data[j];
      mj = beta1 * mj + (1.0 - beta1) * gj;
      vj = beta2 * vj + (1.0 - beta2) * gj * gj;
      p[i]->data[j] -= lr * (mj / c1) / (std::sqrt(vj / c2) + eps);
    }
  }
}

struct StepMetrics {
  std::size_t step = 0;
  double draft_loss = 0.0;
  double calib_loss = 0.0;
  std::vector<double> slot_accuracy;

  nlohmann::json to_json() const {
    return {{"step", step}, {"draft_loss", draft_loss}, {"calib_loss", calib_loss}, {"acc@slot", slot_accuracy}};
  }
};

/// One Adam update of the drafter on a packed batch. The target is untouched.
inline StepMetrics train_step(Model& model, std::span<const std::vector<int>> seqs,
                              std::span<const std::vector<std::size_t>> anchors, const TrainConfig& cfg,
                              AdamState<DraftWeights>& adam) {
  cfg.validate();
  BatchGradients bg = compute_gradients(model, seqs, anchors, cfg);
  adam_update(model.draft, bg.grads, adam, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon);
  return {adam.t, bg.loss.draft, bg.loss.calib, bg.loss.slot_accuracy()};
}

/// Samples sequences and anchors from `corpus`, then runs `cfg.steps` updates.
template <typename OnStep>
void train_drafter(Model& model, std::span<const std::vector<int>> corpus, const TrainConfig& cfg, OnStep&& on_step) {
  cfg.validate();
  if (corpus.empty()) throw std::invalid_argument("train_drafter: empty corpus");
  std::mt19937_64 rng(cfg.seed);
  const auto M = static_cast<std::size_t>(model.config.block_slots);
  AdamState<DraftWeights> adam = AdamState<DraftWeights>::like(model.draft);
  std::uniform_int_distribution<std::size_t> pick(0, corpus.size() - 1);
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    std::vector<std::vector<int>> seqs;
    std::vector<std::vector<std::size_t>> anchors;
    for (std::size_t b = 0; b < cfg.batch_sequences; ++b) {
      seqs.push_back(corpus[pick(rng)]);
      anchors.push_back(sample_anchors(seqs.back().size(), M, cfg.anchors_per_sequence, rng));
    }
    on_step(train_step(model, seqs, anchors, cfg, adam));
  }
}

/// Mean next-token cross entropy of the target over a sequence, and its
/// gradient w.r.t. every frozen tensor.
inline double target_loss_and_gradients(const Model& model, std::span<const int> seq, FrozenWeights* grads) {
  if (seq.size() < 2) throw std::invalid_argument("target loss: need at least two tokens");
  Tape tape;
  const BoundParams p = bind(tape, model, grads != nullptr, false);
  const TapedHidden th = taped_forward(tape, p, model.config, build_causal_layout(0, seq.size()), seq);
  std::vector<std::size_t> rows(seq.size() - 1);
  std::iota(rows.begin(), rows.end(), std::size_t{0});
  Tape::Var logits = tape.matmul(tape.rows(th.frozen, rows), p["head"]);
  std::vector<int> tgt(seq.begin() + 1, seq.end());
  std::vector<double> wt(tgt.size(), 1.0 / static_cast<double>(tgt.size()));
  Tape::Var loss = tape.weighted_cross_entropy(logits, tgt, wt);
  if (grads) {
    tape.backward(loss);
    grads->for_each([&](const std::string& name, Matrix& g) { add_inplace(g, tape.grad(p[name])); });
  }
  return tape.value(loss)(0, 0);
}

struct PretrainConfig {
  std::size_t steps = 300;
  std::size_t batch_sequences = 4;
  double learning_rate = 3e-3;
  std::uint64_t seed = 0;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(PretrainConfig, steps, batch_sequences, learning_rate, seed)

/// Brief next-token training of the target itself, used only to make toy
/// fixtures with learnable structure. Returns the per-step batch loss.
inline std::vector<double> pretrain_target(Model& model, std::span<const std::vector<int>> corpus,
                                           const PretrainConfig& cfg) {
  if (corpus.empty()) throw std::invalid_argument("pretrain_target: empty corpus");
  std::mt19937_64 rng(cfg.seed);
  std::uniform_int_distribution<std::size_t> pick(0, corpus.size() - 1);
  AdamState<FrozenWeights> adam = AdamState<FrozenWeights>::like(model.frozen);
  std::vector<double> history;
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    FrozenWeights grads = adam.m;
    grads.for_each([](const std::string&, Matrix& g) { std::fill(g.data.begin(), g.data.end(), 0.0); });
    double loss = 0.0;
    for (std::size_t b = 0; b < cfg.batch_sequences; ++b) {
      loss += target_loss_and_gradients(model, corpus[pick(rng)], &grads);
    }
    const double inv = 1.0 / static_cast<double>(cfg.batch_sequences);
    grads.for_each([&](const std::string&, Matrix& g) {
      for (double& x : g.data) x *= inv;
    });
    adam_update(model.frozen, grads, adam, cfg.learning_rate, 0.9, 0.999, 1e-8);
    history.push_back(loss * inv);
  }
  return history;
}

/// Held-out comparison of raw and calibrated mask predictions on slots 1..M-1,
/// with every valid anchor of every sequence and unweighted mean CE.
struct CalibrationEval {
  double raw_ce = 0.0;
  double calibrated_ce = 0.0;
  std::size_t predictions = 0;
};

inline CalibrationEval evaluate_calibration(const Model& model, std::span<const std::vector<int>> seqs) {
  const auto M = static_cast<std::size_t>(model.config.block_slots);
  CalibrationEval ev;
  if (M < 2) return ev;
  for (const auto& seq : seqs) {
    if (seq.size() <= M) continue;
    std::vector<std::size_t> anchors(seq.size() - M);
    std::iota(anchors.begin(), anchors.end(), std::size_t{0});
    const AttentionLayout lay = build_training_layout(seq.size(), anchors, M);
    KVStore kv = model.make_kv();
    const ForwardOutput fo = forward(model, kv, lay, seq);
    for (std::size_t n : anchors) {
      const auto rows = lay.block_rows(static_cast<int>(n));
      const auto e_b = model.frozen.embed.row(static_cast<std::size_t>(seq[n + 1]));
      for (std::size_t s = 1; s < M; ++s) {
        const int t = seq[n + 1 + s];
        const auto raw = fo.logits.row(rows[s]);
        ev.raw_ce += cross_entropy(raw, t);
        ev.calibrated_ce += cross_entropy(calibrate(raw, fo.hidden.row(rows[s]), e_b, model.draft.calib), t);
        ++ev.predictions;
      }
    }
  }
  if (ev.predictions) {
    ev.raw_ce /= static_cast<double>(ev.predictions);
    ev.calibrated_ce /= static_cast<double>(ev.predictions);
  }
  return ev;
}

}  // namespace blockspec
