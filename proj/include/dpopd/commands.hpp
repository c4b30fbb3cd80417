// Copyright 2026 The dpopd Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Subcommand implementations behind the dpopd tool. Each takes parsed options,
// writes results to `out` and files under its out_dir only, and reports
// failures by exception; run_command maps those to exit codes.

#ifndef DPOPD_COMMANDS_HPP_
#define DPOPD_COMMANDS_HPP_

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dpopd/accountant.hpp"
#include "dpopd/config.hpp"
#include "dpopd/data.hpp"
#include "dpopd/model.hpp"
#include "dpopd/rng.hpp"
#include "dpopd/trainer.hpp"

namespace dpopd {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitRuntime = 3;

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct GlobalOptions {
  std::string config;
  std::optional<std::uint64_t> seed;
  bool deterministic = false;
  std::string out_dir;
};

/// Runs `fn`, printing any failure to `err`. Usage and configuration problems
/// give kExitUsage; everything else kExitRuntime.
inline int run_command(const std::function<void()>& fn, std::ostream& err) {
  try {
    fn();
    return kExitOk;
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::invalid_argument& e) {
    err << "invalid argument: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
}

inline std::string file_hash(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return hex64(fnv1a64(ss.str()));
}

namespace detail {

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << text;
  if (!f) throw std::runtime_error("write failed for " + path.string());
}

inline std::filesystem::path prepare_out_dir(const std::string& dir) {
  if (dir.empty()) throw UsageError("an output directory is required (--out-dir)");
  std::filesystem::create_directories(dir);
  return std::filesystem::path(dir);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// gen-data

struct GenDataOptions {
  std::size_t n_train = 2000;
  std::size_t n_valid = 200;
  std::size_t n_test = 500;
  std::size_t n_public = 2000;
  std::size_t prompt_len = 8;
  std::size_t total_len = 40;
  int vocab_size = 32;
  int num_codes = 4;
  int order = 2;
  double concentration = 0.5;
  bool deterministic_chain = false;
  std::uint64_t seed = 1;
  std::string out_dir = "data";
};

/// Writes train/valid/test/public .tsv files. The public split comes from the
/// same chain on a separate sampling stream, with ids after the private ones.
inline void cmd_gen_data(const GenDataOptions& o, std::ostream& out) {
  if (o.n_train == 0) throw UsageError("--n-train must be >= 1");
  if (o.n_valid == 0 || o.n_test == 0) throw UsageError("--n-valid and --n-test must be >= 1");
  if (o.n_public == 0) throw UsageError("--n-public must be >= 1");
  if (o.prompt_len < 1 || o.prompt_len >= o.total_len) throw UsageError("need 1 <= --prompt-len < --total-len");
  const Vocab vocab(o.vocab_size, o.num_codes);
  RngStream chain_stream(o.seed, streams::kChain);
  const MarkovChainSpec chain = generate_chain(vocab, o.order, o.concentration, chain_stream, o.deterministic_chain);
  RngStream data_stream(o.seed, streams::kData);
  const SplitCorpus split = sample_corpus(chain, o.n_train, o.n_valid, o.n_test, o.prompt_len, o.total_len,
                                          data_stream);
  Corpus pub;
  pub.header = make_header(chain, "public");
  RngStream public_stream = RngStream(o.seed, streams::kData).fork("public");
  pub.examples = sample_examples(chain, o.n_public, o.prompt_len, o.total_len, public_stream,
                                 o.n_train + o.n_valid + o.n_test);

  const auto dir = detail::prepare_out_dir(o.out_dir);
  for (const Corpus* c : std::initializer_list<const Corpus*>{&split.train, &split.valid, &split.test, &pub}) {
    const auto path = dir / (c->header.split + ".tsv");
    write_corpus(*c, path);
    nlohmann::ordered_json line;
    line["file"] = path.string();
    line["split"] = c->header.split;
    line["n"] = c->size();
    line["chain_hash"] = c->header.chain_hash;
    line["file_hash"] = file_hash(path);
    out << line.dump() << '\n';
  }
}

// ---------------------------------------------------------------------------
// train-teacher

struct TrainTeacherOptions {
  std::string public_path;
  std::string valid_path;
  ModelConfig model;
  TeacherTrainOptions train;
  std::uint64_t seed = 0;
  std::string out_dir;
};

/// Non-private training on the public split; writes teacher.bin.
inline void cmd_train_teacher(const TrainTeacherOptions& o, std::ostream& out) {
  if (o.public_path.empty()) throw UsageError("--public is required");
  const Corpus pub = read_corpus(o.public_path);
  ModelConfig mc = o.model;
  mc.vocab_size = pub.header.vocab_size;
  RngStream stream(o.seed, "teacher");
  const Params params = train_teacher_public(pub, mc, o.train, stream);
  const auto dir = detail::prepare_out_dir(o.out_dir);
  const auto path = dir / "teacher.bin";
  save_params(params, path);
  nlohmann::ordered_json line;
  line["teacher"] = path.string();
  line["params"] = params.size();
  line["file_hash"] = file_hash(path);
  if (!o.valid_path.empty()) {
    const Corpus valid = read_corpus(o.valid_path);
    line["ppl_valid"] = evaluate_perplexity(params, valid);
    line["ppl_uniform"] = static_cast<double>(mc.vocab_size);
  }
  out << line.dump() << '\n';
}

// ---------------------------------------------------------------------------
// Config-driven commands

/// A run config with CLI overrides applied and paths made absolute.
inline RunConfig load_effective_config(const GlobalOptions& g) {
  if (g.config.empty()) throw UsageError("--config is required");
  RunConfig c = load_run_config(g.config);
  c = absolutize_paths(c, std::filesystem::absolute(g.config).parent_path());
  if (g.seed) c.run.seed = *g.seed;
  if (g.deterministic) c.run.deterministic = true;
  if (!g.out_dir.empty()) c.run.out_dir = g.out_dir;
  return c;
}

inline SplitCorpus load_splits(const RunConfig& c) {
  SplitCorpus s;
  s.train = read_corpus(c.data.train);
  s.valid = read_corpus(c.data.valid);
  s.test = read_corpus(c.data.test);
  if (s.valid.header.chain_hash != s.train.header.chain_hash ||
      s.test.header.chain_hash != s.train.header.chain_hash) {
    throw IntegrityError("data splits come from different chains");
  }
  return s;
}

/// Everything a training command needs, resolved once.
struct PreparedRun {
  RunConfig config;
  SplitCorpus data;
  std::optional<TeacherHandle> teacher;
  ResolvedDp dp;
  TrainConfig train;
};

inline PreparedRun prepare_run(const RunConfig& config) {
  PreparedRun p;
  p.config = config;
  p.data = load_splits(config);
  const bool needs_teacher = method_from_string(config.run.method) != Method::kDpSgdOnly;
  if (needs_teacher || config.teacher.kind == "oracle" || std::filesystem::exists(config.teacher.path)) {
    p.teacher = load_teacher(config, p.data.train);
  }
  p.dp = resolve_dp(config, p.data.num_train());
  p.train = to_train_config(config, p.dp, p.data.train.header.vocab_size);
  return p;
}

struct TrainOutcome {
  std::filesystem::path out_dir;
  nlohmann::ordered_json manifest;
};

/// Writes params.bin, metrics.jsonl, resolved_config.json and manifest.json.
inline TrainOutcome cmd_train(const GlobalOptions& g, std::ostream& out) {
  const PreparedRun p = prepare_run(load_effective_config(g));
  const TrainResult r = train(p.train, p.data, p.teacher ? &*p.teacher : nullptr);

  const auto dir = detail::prepare_out_dir(p.config.run.out_dir);
  const RunConfig snapshot = resolved_snapshot(p.config, p.dp);
  detail::write_text(dir / "resolved_config.json", to_json(snapshot).dump(2) + "\n");
  detail::write_text(dir / "metrics.jsonl", metrics_jsonl(r));
  save_params(r.params, dir / "params.bin");

  TrainOutcome o;
  o.out_dir = dir;
  nlohmann::ordered_json& m = o.manifest;
  m["schema_version"] = kSchemaVersion;
  m["method"] = p.config.run.method;
  m["seed"] = p.config.run.seed;
  m["sigma"] = p.dp.sigma;
  m["q"] = p.dp.q;
  m["steps"] = p.dp.steps;
  m["delta"] = p.dp.delta;
  m["epsilon"] = r.epsilon;
  if (p.teacher) m["teacher_fingerprint"] = hex64(p.teacher->fingerprint());
  nlohmann::ordered_json files;
  for (const char* name : {"resolved_config.json", "metrics.jsonl", "params.bin"}) {
    files[name] = file_hash(dir / name);
  }
  m["files"] = files;
  detail::write_text(dir / "manifest.json", m.dump(2) + "\n");

  nlohmann::ordered_json line;
  line["out_dir"] = dir.string();
  line["steps"] = r.steps.size();
  line["sigma"] = p.dp.sigma;
  line["epsilon"] = r.epsilon;
  line["ppl_valid"] = evaluate_perplexity(r.params, p.data.valid);
  out << line.dump() << '\n';
  return o;
}

// ---------------------------------------------------------------------------
// eval

struct EvalCommandOptions {
  std::string params_path;
  std::string split = "test";  // valid | test, read from the config's data section
  std::string corpus_path;     // explicit corpus file instead of a config split
  std::size_t rollouts = 1;
};

/// One JSON line: {"split": s, "ppl_<s>": ..., "rollout_kl": ... | null}.
/// Rollout KL needs a teacher and so a --config.
inline void cmd_eval(const GlobalOptions& g, const EvalCommandOptions& o, std::ostream& out) {
  if (o.params_path.empty()) throw UsageError("--params is required");
  if (o.split != "valid" && o.split != "test") throw UsageError("--split must be valid or test");
  if (o.rollouts < 1) throw UsageError("--rollouts must be >= 1");
  if (g.config.empty() && o.corpus_path.empty()) throw UsageError("either --config or --corpus is required");
  if (!std::filesystem::exists(o.params_path)) throw std::runtime_error("params file " + o.params_path + " not found");
  const Params params = load_params(o.params_path);

  std::optional<RunConfig> config;
  if (!g.config.empty()) config = load_effective_config(g);
  Corpus corpus;
  std::string tag = o.split;
  if (!o.corpus_path.empty()) {
    corpus = read_corpus(o.corpus_path);
    tag = corpus.header.split;
  } else {
    corpus = read_corpus(o.split == "valid" ? config->data.valid : config->data.test);
  }
  if (corpus.header.vocab_size != params.config().vocab_size) {
    throw std::invalid_argument("params vocabulary does not match the corpus");
  }

  nlohmann::ordered_json line;
  line["split"] = tag;
  line["ppl_" + tag] = evaluate_perplexity(params, corpus);
  line["rollout_kl"] = nullptr;
  if (config) {
    const Corpus train_split = read_corpus(config->data.train);
    const TeacherHandle teacher = load_teacher(*config, train_split);
    const std::uint64_t seed = g.seed.value_or(config->run.seed);
    line["rollout_kl"] = evaluate_rollout_kl(params, teacher, corpus, o.rollouts, config->rollout.max_new_tokens,
                                             RngStream(seed, streams::kEval).fork(tag));
  }
  out << line.dump() << '\n';
}

// ---------------------------------------------------------------------------
// compare / sweep-beta

struct CompareOptions {
  std::vector<std::uint64_t> seeds;
  std::size_t rollouts = 1;
};

/// All three methods per seed at the config's privacy setting. The CSV goes to
/// `out` and to comparison.csv in the out_dir.
inline std::vector<RunSummary> cmd_compare(const GlobalOptions& g, const CompareOptions& o, std::ostream& out) {
  if (o.seeds.size() < 3) throw UsageError("compare needs at least 3 seeds (--seeds)");
  if (o.rollouts < 1) throw UsageError("--rollouts must be >= 1");
  RunConfig c = load_effective_config(g);
  c.run.method = to_string(Method::kDpOpd);
  const PreparedRun p = prepare_run(c);
  const std::vector<RunSummary> rows =
      run_comparison(p.train, p.data, *p.teacher, o.seeds, EvalOptions{o.rollouts, c.rollout.max_new_tokens});
  const std::string csv = comparison_csv(rows);
  const auto dir = detail::prepare_out_dir(c.run.out_dir);
  detail::write_text(dir / "comparison.csv", csv);
  out << csv;
  return rows;
}

struct SweepBetaOptions {
  std::vector<double> betas{0.0, 0.3, 0.5, 0.7, 1.0};
  double lambda = 1.0;
};

/// dp-opd at fixed lambda, one student per beta from the same seed.
inline std::vector<BetaSweepRow> cmd_sweep_beta(const GlobalOptions& g, const SweepBetaOptions& o,
                                                std::ostream& out) {
  if (o.betas.empty()) throw UsageError("--betas must not be empty");
  RunConfig c = load_effective_config(g);
  c.run.method = to_string(Method::kDpOpd);
  c.rollout.lambda = o.lambda;
  const PreparedRun p = prepare_run(c);
  const std::vector<BetaSweepRow> rows = run_beta_sweep(p.train, p.data, *p.teacher, o.betas);
  const std::string csv = beta_sweep_csv(rows);
  const auto dir = detail::prepare_out_dir(c.run.out_dir);
  detail::write_text(dir / "beta_sweep.csv", csv);
  out << csv;
  return rows;
}

// ---------------------------------------------------------------------------
// account / calibrate

struct AccountOptions {
  double q = 0.0;
  std::optional<double> sigma;
  std::optional<double> epsilon;
  std::uint64_t steps = 0;
  std::optional<double> delta;
  std::optional<std::uint64_t> n;
};

inline double resolve_delta(const AccountOptions& o) {
  if (o.delta) return *o.delta;
  if (o.n && *o.n > 0) return 1.0 / static_cast<double>(*o.n);
  throw UsageError("--delta is required unless --n is given (delta = 1/n)");
}

inline void cmd_account(const AccountOptions& o, std::ostream& out) {
  if (!o.sigma) throw UsageError("--sigma is required");
  if (o.steps == 0) throw UsageError("--steps must be >= 1");
  const double delta = resolve_delta(o);
  const EpsilonResult e = account(o.q, *o.sigma, o.steps, delta);
  nlohmann::ordered_json line;
  line["q"] = o.q;
  line["sigma"] = *o.sigma;
  line["steps"] = o.steps;
  line["delta"] = delta;
  if (e.non_private) {
    line["epsilon"] = nullptr;
  } else {
    line["epsilon"] = e.epsilon;
  }
  line["best_alpha"] = e.best_alpha;
  out << line.dump() << '\n';
}

inline void cmd_calibrate(const AccountOptions& o, std::ostream& out) {
  if (!o.epsilon) throw UsageError("--epsilon is required");
  if (o.steps == 0) throw UsageError("--steps must be >= 1");
  const double delta = resolve_delta(o);
  const CalibrationResult r = calibrate_sigma(o.q, o.steps, *o.epsilon, delta);
  nlohmann::ordered_json line;
  line["q"] = o.q;
  line["steps"] = o.steps;
  line["delta"] = delta;
  line["target_epsilon"] = *o.epsilon;
  line["sigma"] = r.sigma;
  line["epsilon"] = r.epsilon;
  line["best_alpha"] = r.best_alpha;
  line["at_lower_bound"] = r.at_lower_bound;
  out << line.dump() << '\n';
}

}  // namespace dpopd

#endif  // DPOPD_COMMANDS_HPP_
