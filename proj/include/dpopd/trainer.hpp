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

// Differentially private on-policy distillation training loop, the two
// baselines (student-only DP-SGD and off-policy DP distillation), the public
// teacher trainer and evaluation metrics.

#ifndef DPOPD_TRAINER_HPP_
#define DPOPD_TRAINER_HPP_

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dpopd/accountant.hpp"
#include "dpopd/data.hpp"
#include "dpopd/distill.hpp"
#include "dpopd/model.hpp"
#include "dpopd/nn_core.hpp"
#include "dpopd/privacy.hpp"
#include "dpopd/rng.hpp"

namespace dpopd {

enum class Method { kDpOpd, kDpSgdOnly, kOffPolicyDpKd };

inline std::string to_string(Method m) {
  switch (m) {
    case Method::kDpOpd: return "dp-opd";
    case Method::kDpSgdOnly: return "dpsgd-only";
    case Method::kOffPolicyDpKd: return "offpolicy-dpkd";
  }
  return "?";
}

inline Method method_from_string(const std::string& s) {
  if (s == "dp-opd") return Method::kDpOpd;
  if (s == "dpsgd-only") return Method::kDpSgdOnly;
  if (s == "offpolicy-dpkd") return Method::kOffPolicyDpKd;
  throw std::invalid_argument("unknown method \"" + s + "\"");
}

struct TrainConfig {
  Method method = Method::kDpOpd;
  ModelConfig student;
  double init_scale = 0.05;
  DistillConfig distill;
  DpConfig dp;
  double delta = 0.0;  // 0 means 1/N
  double lambda = 0.5;
  std::size_t max_new_tokens = 32;
  double rollout_temperature = 1.0;
  std::size_t eval_interval = 0;  // 0 disables periodic evaluation
  std::size_t eval_rollouts = 1;
  bool deterministic = true;
  /// Stop before the step whose epsilon would exceed this.
  std::optional<double> epsilon_cap;
  /// Subsampling, branch draws and accounting only; no model work.
  bool dry_run = false;

  /// Effective on-policy probability after method overrides.
  double effective_lambda() const { return method == Method::kDpOpd ? lambda : 0.0; }
  double effective_delta(std::size_t num_train) const {
    return delta > 0.0 ? delta : 1.0 / static_cast<double>(num_train);
  }
  /// Loss configuration actually used by the method.
  DistillConfig effective_distill() const {
    if (method == Method::kDpSgdOnly) return DistillConfig{0.0, 1.0, Divergence::kLinearKl, 1.0};
    return distill;
  }
};

struct StepRecord {
  std::uint64_t step = 0;
  bool on_policy = false;
  std::size_t batch = 0;
  double loss_mean = 0.0;
  double grad_norm_mean = 0.0;  // pre-clip
  double clip_fraction = 0.0;
  double epsilon = 0.0;
  double max_clipped_norm = 0.0;
};

struct EvalRecord {
  std::uint64_t step = 0;
  double ppl_valid = 0.0;
  double rollout_kl = std::numeric_limits<double>::quiet_NaN();
};

struct TrainResult {
  Params params;
  std::vector<StepRecord> steps;
  std::vector<EvalRecord> evals;
  PrivacyLedger ledger;
  double epsilon = 0.0;
  /// Nonzero loss gradient found at a masked-out (prompt) position.
  std::size_t mask_violations = 0;
  double max_clipped_norm = 0.0;
  bool stopped_on_budget = false;
};

/// Called after every update with the parameters before and after it.
using StepObserver =
    std::function<void(const StepRecord&, const Params& before, const NoisedUpdate&, const Params& after)>;

// ---------------------------------------------------------------------------
// Evaluation

/// log p(. | prefix) for a state; used to evaluate students and teachers alike.
using LogProbFn = std::function<Vector(std::span<const Token>)>;

inline LogProbFn student_log_probs(const Params& params) {
  return [&params](std::span<const Token> state) {
    return log_softmax(logits_at(params, state, state.size()), 1.0);
  };
}

inline LogProbFn teacher_log_probs_fn(const TeacherHandle& teacher) {
  return [&teacher](std::span<const Token> state) { return teacher_log_probs(teacher, state, 1.0); };
}

/// exp(mean NLL) over reference continuation tokens, teacher-forced, tau = 1.
inline double evaluate_perplexity(const LogProbFn& model, const Corpus& split) {
  double nll = 0.0;
  std::size_t count = 0;
  for (const Example& ex : split.examples) {
    const ModelInput in = build_model_input(ex);
    TokenSeq seq = in.tokens;
    seq.insert(seq.end(), ex.reference.begin(), ex.reference.end());
    for (std::size_t t = in.continuation_offset; t < seq.size(); ++t) {
      const Vector lp = model(std::span<const Token>(seq.data(), t));
      nll -= lp[static_cast<std::size_t>(seq[t])];
      ++count;
    }
  }
  if (count == 0) throw std::invalid_argument("evaluate_perplexity: split has no continuation tokens");
  return std::exp(nll / static_cast<double>(count));
}

inline double evaluate_perplexity(const Params& params, const Corpus& split) {
  return evaluate_perplexity(student_log_probs(params), split);
}

inline double evaluate_perplexity(const TeacherHandle& teacher, const Corpus& split) {
  return evaluate_perplexity(teacher_log_probs_fn(teacher), split);
}

/// Mean KL(p_T(.|s) || p_S(.|s)) at tau = 1 over every continuation state the
/// student visits in `rollouts` sampled continuations per prompt.
inline double evaluate_rollout_kl(const Params& student, const TeacherHandle& teacher, const Corpus& prompts,
                                  std::size_t rollouts, std::size_t max_new, const RngStream& stream) {
  if (rollouts < 1) throw std::invalid_argument("evaluate_rollout_kl: need at least one rollout per prompt");
  double total = 0.0;
  std::size_t states = 0;
  for (const Example& ex : prompts.examples) {
    const ModelInput in = build_model_input(ex);
    for (std::size_t r = 0; r < rollouts; ++r) {
      RngStream rs = stream.fork(ex.id).fork(r);
      const TokenSeq cont = sample_continuation(student, in.tokens, max_new, 1.0, rs);
      TokenSeq seq = in.tokens;
      seq.insert(seq.end(), cont.begin(), cont.end());
      for (std::size_t t = in.continuation_offset; t < seq.size(); ++t) {
        const std::span<const Token> state(seq.data(), t);
        const Vector p_t = exp_of(teacher_log_probs(teacher, state, 1.0));
        const Vector log_p_s = log_softmax(logits_at(student, state, t), 1.0);
        total += kl_divergence(p_t, log_p_s);
        ++states;
      }
    }
  }
  return states ? total / static_cast<double>(states) : 0.0;
}

// ---------------------------------------------------------------------------
// Training

namespace detail {

struct ExampleGrad {
  Vector grad;
  double loss = 0.0;
  std::size_t mask_violations = 0;
};

// Builds s_i, runs the loss on its continuation positions and backpropagates.
inline ExampleGrad example_gradient(const Params& params, const TeacherHandle* teacher, const Example& ex,
                                    bool on_policy, const TrainConfig& config, const DistillConfig& loss_config,
                                    RngStream& rollout_stream) {
  const ModelInput in = build_model_input(ex);
  TokenSeq seq = in.tokens;
  std::vector<std::optional<Token>> reference;
  if (on_policy) {
    const TokenSeq cont = sample_continuation(params, in.tokens, config.max_new_tokens,
                                              config.rollout_temperature, rollout_stream);
    seq.insert(seq.end(), cont.begin(), cont.end());
    reference.assign(seq.size(), std::nullopt);  // rollout tokens are not labels
  } else {
    seq.insert(seq.end(), ex.reference.begin(), ex.reference.end());
    reference.assign(seq.size(), std::nullopt);
    for (std::size_t t = in.continuation_offset; t < seq.size(); ++t) reference[t] = seq[t];
  }
  const std::vector<bool> mask = continuation_mask(seq.size(), in.continuation_offset);
  const bool needs_teacher = !(loss_config.gamma == 1.0 && !on_policy);
  std::vector<Vector> z(seq.size()), log_p_t(seq.size());
  for (std::size_t t = 0; t < seq.size(); ++t) {
    if (!mask[t]) continue;
    z[t] = logits_at(params, seq, t);
    if (needs_teacher) log_p_t[t] = teacher_log_probs(*teacher, std::span<const Token>(seq.data(), t), loss_config.tau_d);
  }
  const SequenceLoss sl = sequence_loss(z, log_p_t, mask, reference, loss_config);
  ExampleGrad out;
  out.loss = sl.loss;
  for (std::size_t t = 0; t < seq.size(); ++t) {
    if (mask[t]) continue;
    for (double g : sl.grad[t]) {
      if (g != 0.0) {
        ++out.mask_violations;
        break;
      }
    }
  }
  out.grad = per_example_grad(params, seq, mask, sl.grad);
  return out;
}

}  // namespace detail

/// Runs U DP-SGD steps of the configured method on `corpus.train`.
/// `teacher` is required for the distillation methods; for dpsgd-only it is
/// used only by periodic rollout-KL evaluation.
inline TrainResult train(const TrainConfig& config, const SplitCorpus& corpus, const TeacherHandle* teacher,
                         const StepObserver& observer = {}) {
  const std::size_t N = corpus.num_train();
  if (N == 0) throw std::invalid_argument("train: empty training split");
  DpConfig dp = config.dp;
  dp.num_records = N;
  dp.validate();
  config.student.validate();
  const DistillConfig loss_config = config.effective_distill();
  loss_config.validate();
  const double lambda = config.effective_lambda();
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw std::invalid_argument("train: lambda must be in [0, 1]");
  if (config.max_new_tokens < 1) throw std::invalid_argument("train: max_new_tokens must be >= 1");
  const Vocab vocab = corpus.train.header.vocab();
  if (config.student.vocab_size != vocab.size) {
    throw std::invalid_argument("train: student vocabulary (" + std::to_string(config.student.vocab_size) +
                                ") does not match corpus (" + std::to_string(vocab.size) + ")");
  }
  if (config.student.context < corpus.train.header.order + 2) {
    throw std::invalid_argument("train: student context " + std::to_string(config.student.context) +
                                " must cover the chain order plus code and BOS (>= " +
                                std::to_string(corpus.train.header.order + 2) + ")");
  }
  if (config.method != Method::kDpSgdOnly && teacher == nullptr) {
    throw std::invalid_argument("train: method " + to_string(config.method) + " requires a teacher");
  }
  if (teacher != nullptr && teacher->vocab_size() != vocab.size) {
    throw std::invalid_argument("train: teacher/student vocabulary mismatch (shared tokenizer required)");
  }

  const std::uint64_t seed = dp.seed;
  const double delta = config.effective_delta(N);
  const double expected_batch = dp.expected_batch();
  const PrivacyLedger base_ledger(dp.sampling_rate, dp.noise_multiplier, delta);

  TrainResult result;
  RngStream init_stream(seed, streams::kInit);
  result.params = init_params(config.student, config.init_scale, init_stream);
  result.ledger = base_ledger;
  const std::size_t P = result.params.size();
  const RngStream subsample_root(seed, streams::kSubsample);
  const RngStream rollout_root(seed, streams::kRollout);
  const RngStream eval_root(seed, streams::kEval);
  RngStream branch_stream(seed, streams::kBranch);

  for (std::uint64_t u = 1; u <= dp.steps; ++u) {
    // The ledger depends only on (q, sigma, u, delta).
    PrivacyLedger ledger = compose(base_ledger, u);
    const EpsilonResult eps = epsilon_at(ledger);
    if (config.epsilon_cap && eps.epsilon > *config.epsilon_cap) {
      result.stopped_on_budget = true;
      break;
    }

    RngStream sub = subsample_root.fork(u);
    const std::vector<std::size_t> batch = poisson_subsample(N, dp.sampling_rate, sub);
    branch_stream.seek(u);
    const bool on_policy = branch_stream.uniform() < lambda;

    StepRecord rec;
    rec.step = u;
    rec.on_policy = on_policy;
    rec.batch = batch.size();
    rec.epsilon = eps.epsilon;

    if (!config.dry_run) {
      std::vector<Vector> clipped;
      clipped.reserve(batch.size());
      double loss_sum = 0.0, norm_sum = 0.0;
      std::size_t n_clipped = 0;
      const RngStream step_rollouts = rollout_root.fork(u);
      for (std::size_t idx : batch) {
        const Example& ex = corpus.train.examples[idx];
        RngStream rs = step_rollouts.fork(ex.id);
        detail::ExampleGrad eg =
            detail::example_gradient(result.params, teacher, ex, on_policy, config, loss_config, rs);
        result.mask_violations += eg.mask_violations;
        const double norm = l2_norm(eg.grad);
        norm_sum += norm;
        loss_sum += eg.loss;
        if (norm > dp.clip_norm) ++n_clipped;
        clipped.push_back(clip_gradient(eg.grad, dp.clip_norm));
        const double post = l2_norm(clipped.back());
        rec.max_clipped_norm = std::max(rec.max_clipped_norm, post);
        if (post > dp.clip_norm + 1e-9) throw ContractViolation("train: post-clip norm exceeds C");
      }
      if (!batch.empty()) {
        const double n = static_cast<double>(batch.size());
        rec.loss_mean = loss_sum / n;
        rec.grad_norm_mean = norm_sum / n;
        rec.clip_fraction = static_cast<double>(n_clipped) / n;
      }
      RngStream noise = noise_stream_for_step(seed, u, P);
      const NoisedUpdate update =
          noisy_aggregate(clipped, P, expected_batch, dp.clip_norm, dp.noise_multiplier, noise, u);
      Params next = dp_sgd_step(result.params, update, dp.learning_rate);
      if (observer) observer(rec, result.params, update, next);
      result.params = std::move(next);
    }
    result.max_clipped_norm = std::max(result.max_clipped_norm, rec.max_clipped_norm);
    result.ledger = std::move(ledger);
    result.epsilon = eps.epsilon;
    result.steps.push_back(rec);

    if (!config.dry_run && config.eval_interval > 0 && u % config.eval_interval == 0) {
      EvalRecord ev;
      ev.step = u;
      ev.ppl_valid = evaluate_perplexity(result.params, corpus.valid);
      if (teacher != nullptr) {
        ev.rollout_kl = evaluate_rollout_kl(result.params, *teacher, corpus.valid, config.eval_rollouts,
                                            config.max_new_tokens, eval_root.fork(u));
      }
      result.evals.push_back(ev);
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Public teacher

struct TeacherTrainOptions {
  std::size_t epochs = 20;
  std::size_t batch_size = 16;
  double learning_rate = 0.5;
  double init_scale = 0.05;
};

/// Non-private minibatch SGD on cross-entropy over a public corpus.
inline Params train_teacher_public(const Corpus& public_corpus, const ModelConfig& config,
                                   const TeacherTrainOptions& options, RngStream& stream) {
  config.validate();
  if (public_corpus.examples.empty()) throw std::invalid_argument("train_teacher_public: empty corpus");
  if (options.batch_size < 1) throw std::invalid_argument("train_teacher_public: batch size must be >= 1");
  RngStream init = stream.fork(streams::kInit);
  Params params = init_params(config, options.init_scale, init);
  const DistillConfig ce{0.0, 1.0, Divergence::kLinearKl, 1.0};
  TrainConfig tc;
  tc.student = config;
  std::vector<std::size_t> order(public_corpus.examples.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  RngStream unused(0, "unused");
  for (std::size_t epoch = 0; epoch < options.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(stream.uniform() * static_cast<double>(i)) % i;
      std::swap(order[i - 1], order[j]);
    }
    for (std::size_t start = 0; start < order.size(); start += options.batch_size) {
      const std::size_t end = std::min(order.size(), start + options.batch_size);
      Vector sum(params.size(), 0.0);
      for (std::size_t b = start; b < end; ++b) {
        const auto eg =
            detail::example_gradient(params, nullptr, public_corpus.examples[order[b]], false, tc, ce, unused);
        for (std::size_t j = 0; j < sum.size(); ++j) sum[j] += eg.grad[j];
      }
      const double scale = options.learning_rate / static_cast<double>(end - start);
      Vector flat(params.flat().begin(), params.flat().end());
      for (std::size_t j = 0; j < flat.size(); ++j) flat[j] -= scale * sum[j];
      params = Params(config, std::move(flat));
    }
  }
  return params;
}

// ---------------------------------------------------------------------------
// Metrics log and experiment drivers

inline nlohmann::ordered_json to_json(const StepRecord& r) {
  nlohmann::ordered_json j;
  j["kind"] = "step";
  j["step"] = r.step;
  j["branch"] = r.on_policy ? "on" : "off";
  j["batch"] = r.batch;
  j["loss"] = r.loss_mean;
  j["clip_frac"] = r.clip_fraction;
  j["grad_norm_mean"] = r.grad_norm_mean;
  j["epsilon"] = r.epsilon;
  return j;
}

inline nlohmann::ordered_json to_json(const EvalRecord& r) {
  nlohmann::ordered_json j;
  j["kind"] = "eval";
  j["step"] = r.step;
  j["ppl_valid"] = r.ppl_valid;
  if (std::isnan(r.rollout_kl)) {
    j["rollout_kl"] = nullptr;
  } else {
    j["rollout_kl"] = r.rollout_kl;
  }
  return j;
}

/// JSON Lines: step records in order, each eval record after its step.
inline std::string metrics_jsonl(const TrainResult& result) {
  std::string out;
  std::size_t e = 0;
  for (const StepRecord& s : result.steps) {
    out += to_json(s).dump();
    out += '\n';
    while (e < result.evals.size() && result.evals[e].step == s.step) {
      out += to_json(result.evals[e++]).dump();
      out += '\n';
    }
  }
  return out;
}

struct RunSummary {
  Method method = Method::kDpOpd;
  std::uint64_t seed = 0;
  double ppl_test = 0.0;
  double rollout_kl = 0.0;
  double epsilon = 0.0;
};

struct EvalOptions {
  std::size_t rollouts = 1;
  std::size_t max_new_tokens = 32;
};

/// Trains one configuration and evaluates it on the test split.
inline RunSummary train_and_evaluate(const TrainConfig& config, const SplitCorpus& corpus,
                                     const TeacherHandle& teacher, const EvalOptions& eval) {
  const TrainResult r = train(config, corpus, &teacher);
  RunSummary s;
  s.method = config.method;
  s.seed = config.dp.seed;
  s.ppl_test = evaluate_perplexity(r.params, corpus.test);
  s.rollout_kl = evaluate_rollout_kl(r.params, teacher, corpus.test, eval.rollouts, eval.max_new_tokens,
                                     RngStream(config.dp.seed, streams::kEval).fork("test"));
  s.epsilon = r.epsilon;
  return s;
}

/// All three methods at identical (epsilon, delta, data, evaluation) for each seed.
inline std::vector<RunSummary> run_comparison(const TrainConfig& base, const SplitCorpus& corpus,
                                              const TeacherHandle& teacher, const std::vector<std::uint64_t>& seeds,
                                              const EvalOptions& eval) {
  if (seeds.size() < 3) throw std::invalid_argument("compare: need at least 3 seeds");
  std::vector<RunSummary> rows;
  for (const Method m : {Method::kDpSgdOnly, Method::kOffPolicyDpKd, Method::kDpOpd}) {
    for (const std::uint64_t seed : seeds) {
      TrainConfig c = base;
      c.method = m;
      c.dp.seed = seed;
      rows.push_back(train_and_evaluate(c, corpus, teacher, eval));
    }
  }
  return rows;
}

struct MethodStats {
  Method method = Method::kDpOpd;
  double ppl_mean = 0.0, ppl_std = 0.0, kl_mean = 0.0, kl_std = 0.0;
  std::size_t runs = 0;
};

inline MethodStats summarize(const std::vector<RunSummary>& rows, Method m) {
  MethodStats s;
  s.method = m;
  std::vector<double> ppl, kl;
  for (const RunSummary& r : rows) {
    if (r.method != m) continue;
    ppl.push_back(r.ppl_test);
    kl.push_back(r.rollout_kl);
  }
  s.runs = ppl.size();
  auto mean_std = [](const std::vector<double>& x, double& mean, double& sd) {
    mean = sd = 0.0;
    if (x.empty()) return;
    for (double v : x) mean += v;
    mean /= static_cast<double>(x.size());
    if (x.size() < 2) return;
    for (double v : x) sd += (v - mean) * (v - mean);
    sd = std::sqrt(sd / static_cast<double>(x.size() - 1));
  };
  mean_std(ppl, s.ppl_mean, s.ppl_std);
  mean_std(kl, s.kl_mean, s.kl_std);
  return s;
}

/// CSV with one row per run and a mean/stddev row per method.
inline std::string comparison_csv(const std::vector<RunSummary>& rows) {
  std::ostringstream out;
  out.precision(17);
  out << "method,seed,ppl_test,rollout_kl,ppl_std,rollout_kl_std\n";
  for (const RunSummary& r : rows) {
    out << to_string(r.method) << ',' << r.seed << ',' << r.ppl_test << ',' << r.rollout_kl << ",,\n";
  }
  for (const Method m : {Method::kDpSgdOnly, Method::kOffPolicyDpKd, Method::kDpOpd}) {
    const MethodStats s = summarize(rows, m);
    if (s.runs == 0) continue;
    out << to_string(m) << ",mean," << s.ppl_mean << ',' << s.kl_mean << ',' << s.ppl_std << ',' << s.kl_std
        << '\n';
  }
  return out.str();
}

struct BetaSweepRow {
  double beta = 0.0;
  double ppl_test = 0.0;
};

/// One student per beta, all from the same seed and initialization.
inline std::vector<BetaSweepRow> run_beta_sweep(const TrainConfig& base, const SplitCorpus& corpus,
                                                const TeacherHandle& teacher, const std::vector<double>& betas) {
  std::vector<BetaSweepRow> rows;
  for (const double beta : betas) {
    TrainConfig c = base;
    c.distill.beta = beta;
    const TrainResult r = train(c, corpus, &teacher);
    rows.push_back({beta, evaluate_perplexity(r.params, corpus.test)});
  }
  return rows;
}

inline std::string beta_sweep_csv(const std::vector<BetaSweepRow>& rows) {
  std::ostringstream out;
  out.precision(17);
  out << "beta,ppl_test\n";
  for (const BetaSweepRow& r : rows) out << r.beta << ',' << r.ppl_test << '\n';
  return out.str();
}

}  // namespace dpopd

#endif  // DPOPD_TRAINER_HPP_
