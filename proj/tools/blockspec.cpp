// Copyright 2026 The blockspec Authors
// SPDX-License-Identifier: Apache-2.0
//
// blockspec: corpus generation, drafter training, decoding, batch benchmarks
// and the losslessness oracle suite.

#include <fstream>
#include <iostream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "blockspec/checkpoint.hpp"
#include "blockspec/corpus.hpp"
#include "blockspec/engine.hpp"
#include "blockspec/oracle.hpp"
#include "blockspec/scheduler.hpp"
#include "blockspec/trainer.hpp"
#include "json.hpp"

namespace {

using namespace blockspec;
using nlohmann::json;

constexpr int kExitOk = 0;
constexpr int kExitCheckFailed = 1;
constexpr int kExitUsage = 2;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Everything a run can be configured with. Every section is optional in the
/// config file; missing keys keep their defaults.
struct AppConfig {
  ModelConfig model;
  CorpusSpec corpus;
  TrainConfig train;
  PretrainConfig pretrain;
  CostProfile cost;

  json to_json() const {
    return {{"model", model}, {"corpus", corpus}, {"train", train}, {"pretrain", pretrain}, {"cost", cost}};
  }

  std::uint64_t hash() const { return fnv1a64(to_json().dump()); }
};

AppConfig load_config(const std::string& path) {
  AppConfig c;
  if (path.empty()) return c;
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open config '" + path + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw UsageError("config '" + path + "': " + e.what());
  }
  auto section = [&](const char* key, auto& target) {
    if (j.contains(key)) target = j.at(key).get<std::decay_t<decltype(target)>>();
  };
  section("model", c.model);
  section("corpus", c.corpus);
  section("train", c.train);
  section("pretrain", c.pretrain);
  section("cost", c.cost);
  c.model.validate();
  c.corpus.validate();
  c.train.validate();
  c.cost.validate();
  return c;
}

/// Report sink: --out file or stdout, one JSON object per line.
class Report {
 public:
  explicit Report(const std::string& path) {
    if (!path.empty()) {
      file_ = std::make_unique<std::ofstream>(path);
      if (!*file_) throw UsageError("cannot write '" + path + "'");
    }
  }
  void emit(const json& j) { out() << j.dump() << '\n'; }
  std::ostream& out() { return file_ ? *file_ : std::cout; }

 private:
  std::unique_ptr<std::ofstream> file_;
};

std::vector<std::vector<int>> load_corpus(const std::string& path, int vocab) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open corpus '" + path + "'");
  auto seqs = read_corpus(in, vocab);
  if (seqs.empty()) throw UsageError("corpus '" + path + "' has no sequences");
  return seqs;
}

Model load_model(const std::string& path) {
  try {
    return load_checkpoint(path);
  } catch (const std::exception& e) {
    throw UsageError(e.what());
  }
}

std::vector<int> parse_tokens(const std::string& s, int vocab) {
  std::istringstream in(s);
  std::vector<std::vector<int>> seqs;
  try {
    seqs = read_corpus(in, vocab);
  } catch (const std::exception& e) {
    throw UsageError(std::string("prompt: ") + e.what());
  }
  if (seqs.size() != 1) throw UsageError("prompt must be one line of token ids");
  return seqs[0];
}

json run_header(const std::string& command, const AppConfig& cfg, const ModelConfig& mc, std::uint64_t seed) {
  return {{"kind", "header"},
          {"command", command},
          {"config_hash", cfg.hash()},
          {"seed", seed},
          {"L", mc.n_layers},
          {"N", mc.n_draft_layers},
          {"M", mc.block_slots},
          {"vocab", mc.vocab_size}};
}

struct Common {
  std::string config;
  std::uint64_t seed = 0;
  std::string out;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "JSON config with optional model/corpus/train/pretrain/cost sections");
  cmd->add_option("--seed", c.seed, "Run seed");
  cmd->add_option("--out", c.out, "Output path (default: stdout)");
}

int cmd_gen_corpus(const Common& c) {
  AppConfig cfg = load_config(c.config);
  cfg.corpus.seed = c.seed;
  const auto seqs = generate_corpus(cfg.corpus);
  Report r(c.out);
  write_corpus(r.out(), cfg.corpus, seqs);
  return kExitOk;
}

int cmd_init(const Common& c, const std::string& corpus_path) {
  AppConfig cfg = load_config(c.config);
  Model m;
  m.config = cfg.model;
  m.frozen = init_frozen(cfg.model, c.seed);
  if (c.out.empty()) throw UsageError("init: --out checkpoint path is required");
  Report r("");
  r.emit(run_header("init", cfg, m.config, c.seed));
  if (!corpus_path.empty()) {
    const auto corpus = load_corpus(corpus_path, cfg.model.vocab_size);
    PretrainConfig pc = cfg.pretrain;
    pc.seed = c.seed;
    const auto hist = pretrain_target(m, corpus, pc);
    for (std::size_t i = 0; i < hist.size(); ++i) {
      if ((i + 1) % 50 == 0 || i + 1 == hist.size()) r.emit({{"kind", "pretrain"}, {"step", i + 1}, {"loss", hist[i]}});
    }
  }
  m.draft = init_draft(m.config, m.frozen, c.seed + 1);
  save_checkpoint(c.out, m);
  r.emit({{"kind", "checkpoint"},
          {"path", c.out},
          {"frozen_parameters", parameter_count(m.frozen)},
          {"trainable_parameters", parameter_count(m.draft)}});
  return kExitOk;
}

int cmd_train(const Common& c, const std::string& ckpt_in, const std::string& ckpt_out, const std::string& corpus_path,
              std::optional<std::size_t> steps) {
  AppConfig cfg = load_config(c.config);
  Model m = load_model(ckpt_in);
  const auto corpus = load_corpus(corpus_path, m.config.vocab_size);
  TrainConfig tc = cfg.train;
  tc.seed = c.seed;
  if (steps) tc.steps = *steps;
  Report r(c.out);
  json header = run_header("train", cfg, m.config, c.seed);
  header["trainable_parameters"] = parameter_count(m.draft);
  header["train"] = tc;
  r.emit(header);
  train_drafter(m, corpus, tc, [&](const StepMetrics& s) { r.emit(s.to_json()); });
  save_checkpoint(ckpt_out, m);
  return kExitOk;
}

struct DecodeFlags {
  std::string mode = "auto";
  double theta = 0.05;
  double temperature = 0.0;
  bool greedy = false;
  std::size_t max_tokens = 32;
  std::size_t threshold = 2;
};

void add_decode_flags(CLI::App* cmd, DecodeFlags& f) {
  cmd->add_option("--mode", f.mode, "auto, parallel or sequential")->check(CLI::IsMember({"auto", "parallel", "sequential"}));
  cmd->add_option("--theta", f.theta, "Branch pruning threshold")->check(CLI::Range(0.0, 1.0));
  cmd->add_option("--temperature", f.temperature, "Sampling temperature (0 = greedy)")->check(CLI::NonNegativeNumber);
  cmd->add_flag("--greedy", f.greedy, "Same as --temperature 0");
  cmd->add_option("--max-tokens", f.max_tokens, "New tokens per stream")->check(CLI::PositiveNumber);
  cmd->add_option("--threshold", f.threshold, "Largest batch decoded in parallel mode")->check(CLI::PositiveNumber);
}

RunConfig run_config(const DecodeFlags& f, const AppConfig& cfg, std::uint64_t seed) {
  RunConfig rc;
  rc.policy = parse_policy(f.mode);
  rc.threshold = f.threshold;
  rc.profile = cfg.cost;
  rc.engine.theta = f.theta;
  rc.engine.temperature = f.greedy ? 0.0 : f.temperature;
  rc.engine.max_new_tokens = f.max_tokens;
  rc.engine.seed = seed;
  return rc;
}

json decode_header(const std::string& command, const AppConfig& cfg, const Model& m, std::uint64_t seed,
                   const RunConfig& rc) {
  json h = run_header(command, cfg, m.config, seed);
  h["mode_policy"] = to_string(rc.policy);
  h["theta"] = rc.engine.theta;
  h["temperature"] = rc.engine.temperature;
  h["threshold"] = rc.threshold;
  h["max_tokens"] = rc.engine.max_new_tokens;
  h["cost"] = rc.profile;
  return h;
}

int cmd_decode(const Common& c, const std::string& ckpt, const std::string& prompt, const DecodeFlags& f) {
  const AppConfig cfg = load_config(c.config);
  const Model m = load_model(ckpt);
  const RunConfig rc = run_config(f, cfg, c.seed);
  const std::vector<std::vector<int>> prompts{parse_tokens(prompt, m.config.vocab_size)};
  const std::vector<std::uint64_t> ids{0};
  const RunReport rep = run_batch(m, prompts, ids, rc);
  Report r(c.out);
  r.emit(decode_header("decode", cfg, m, c.seed, rc));
  const StreamRecord& s = rep.streams[0];
  for (const auto& st : s.trace) r.emit(st.to_json());
  json rec = s.to_json();
  rec["output"] = s.output;
  r.emit(rec);
  return kExitOk;
}

int cmd_bench(const Common& c, const std::string& ckpt, const std::string& corpus_path,
              const std::vector<std::size_t>& batches, std::size_t prompt_len, const DecodeFlags& f) {
  const AppConfig cfg = load_config(c.config);
  const Model m = load_model(ckpt);
  const auto corpus = load_corpus(corpus_path, m.config.vocab_size);
  const RunConfig rc = run_config(f, cfg, c.seed);
  Report r(c.out);
  json h = decode_header("bench", cfg, m, c.seed, rc);
  h["batches"] = batches;
  h["prompt_len"] = prompt_len;
  r.emit(h);
  for (std::size_t b : batches) {
    if (b == 0) throw UsageError("bench: batch sizes must be >= 1");
    std::vector<std::vector<int>> prompts;
    std::vector<std::uint64_t> ids;
    for (std::size_t i = 0; i < b; ++i) {
      const auto& seq = corpus[i % corpus.size()];
      prompts.emplace_back(seq.begin(), seq.begin() + static_cast<std::ptrdiff_t>(std::min(prompt_len, seq.size())));
      ids.push_back(i);
    }
    const RunReport rep = run_batch(m, prompts, ids, rc);
    double cost = 0.0, tokens = 0.0;
    for (const auto& s : rep.streams) {
      cost = std::max(cost, s.est_cost);
      tokens += static_cast<double>(s.tokens);
    }
    r.emit({{"kind", "batch"}, {"batch", b}, {"mode", to_string(rep.mode)}, {"tau", rep.tau()},
            {"est_cost", cost}, {"est_tokens_per_cost", cost > 0 ? tokens / cost : 0.0}});
    for (const auto& s : rep.streams) {
      json rec = s.to_json();
      rec["batch"] = b;
      r.emit(rec);
    }
  }
  return kExitOk;
}

struct OracleFlags {
  std::string checkpoint;
  std::size_t tv_decodes = 20000;
  std::size_t prompts = 100;
  std::size_t kv_steps = 200;
  std::size_t grad_seeds = 5;
};

int cmd_oracle(const Common& c, const OracleFlags& f) {
  const AppConfig cfg = load_config(c.config);
  Model m;
  if (!f.checkpoint.empty()) {
    m = load_model(f.checkpoint);
  } else {
    m.config = cfg.model;
    m.frozen = init_frozen(m.config, c.seed);
    m.draft = init_random_draft(m.config, c.seed + 1);
  }
  Report r(c.out);
  r.emit(run_header("oracle", cfg, m.config, c.seed));
  std::vector<CheckResult> results;
  auto run = [&](CheckResult res) {
    std::cerr << res.line() << '\n';
    r.emit(res.to_json());
    results.push_back(std::move(res));
  };
  run(check_marginal_identity(10000, 16, c.seed));
  const Model tv = tv_fixture_model(c.seed);
  const std::vector<int> tv_prompt{1, 4};
  for (DecodeMode mode : {DecodeMode::kParallel, DecodeMode::kSequential}) {
    run(check_sequence_tv(tv, mode, tv_prompt, 3, f.tv_decodes, 1.0, 0.05, c.seed));
  }
  const double thetas[] = {0.0, 0.05, 0.5};
  run(check_greedy_exact(m, f.prompts, thetas, 16, c.seed));
  run(check_isolation(20, c.seed));
  for (DecodeMode mode : {DecodeMode::kParallel, DecodeMode::kSequential}) {
    run(check_kv_reuse(m, mode, f.kv_steps, 1.0, c.seed));
  }
  run(check_gradients(f.grad_seeds, c.seed));
  run(check_token_accounting(m, 8, thetas, 24, c.seed));
  const bool ok = std::all_of(results.begin(), results.end(), [](const CheckResult& x) { return x.pass; });
  r.emit({{"kind", "summary"}, {"pass", ok}, {"checks", results.size()}});
  return ok ? kExitOk : kExitCheckFailed;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Block-draft speculative decoding toolkit"};
  app.require_subcommand(1);

  Common common;
  std::string corpus, ckpt, ckpt_out, prompt;
  std::optional<std::size_t> steps;
  DecodeFlags decode;
  std::vector<std::size_t> batches{1, 2, 4, 8, 16};
  std::size_t prompt_len = 8;
  OracleFlags oracle;

  auto* gen = app.add_subcommand("gen-corpus", "Write a seeded order-2 Markov corpus");
  add_common(gen, common);

  auto* init = app.add_subcommand("init", "Write a fresh checkpoint to --out, optionally pre-training the target on --corpus");
  add_common(init, common);
  init->description("Create a checkpoint at --out (optionally pre-training the target on a corpus)");
  init->add_option("--corpus", corpus, "Corpus to pre-train the target on");

  auto* train = app.add_subcommand("train", "Train the drafter; metrics as JSON lines");
  add_common(train, common);
  train->add_option("--checkpoint", ckpt, "Input checkpoint")->required();
  train->add_option("--save", ckpt_out, "Output checkpoint")->required();
  train->add_option("--corpus", corpus, "Training corpus")->required();
  train->add_option("--steps", steps, "Override train.steps");

  auto* dec = app.add_subcommand("decode", "Decode one prompt");
  add_common(dec, common);
  add_decode_flags(dec, decode);
  dec->add_option("--checkpoint", ckpt, "Checkpoint")->required();
  dec->add_option("--prompt", prompt, "Space-separated token ids")->required();

  auto* bench = app.add_subcommand("bench", "Decode batches of corpus prompts and report estimated costs");
  add_common(bench, common);
  add_decode_flags(bench, decode);
  bench->add_option("--checkpoint", ckpt, "Checkpoint")->required();
  bench->add_option("--corpus", corpus, "Prompt source")->required();
  bench->add_option("--batch", batches, "Batch sizes")->delimiter(',');
  bench->add_option("--prompt-len", prompt_len, "Prompt tokens per stream")->check(CLI::PositiveNumber);

  auto* orc = app.add_subcommand("oracle", "Run the losslessness and correctness checks");
  add_common(orc, common);
  orc->add_option("--checkpoint", oracle.checkpoint, "Checkpoint (default: fresh random model)");
  orc->add_option("--tv-decodes", oracle.tv_decodes, "Decodes per sequence-distribution check");
  orc->add_option("--prompts", oracle.prompts, "Prompts for the greedy exactness check");
  orc->add_option("--kv-steps", oracle.kv_steps, "Decode steps for the cache replay check");
  orc->add_option("--grad-seeds", oracle.grad_seeds, "Seeds for the gradient check");

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (*gen) return cmd_gen_corpus(common);
    if (*init) return cmd_init(common, corpus);
    if (*train) return cmd_train(common, ckpt, ckpt_out, corpus, steps);
    if (*dec) return cmd_decode(common, ckpt, prompt, decode);
    if (*bench) return cmd_bench(common, ckpt, corpus, batches, prompt_len, decode);
    if (*orc) return cmd_oracle(common, oracle);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitCheckFailed;
  }
  return kExitUsage;
}
