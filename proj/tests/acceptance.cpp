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

// End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
// exits nonzero if any criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "dpopd/commands.hpp"
#include "oracles.hpp"

namespace dpopd {
namespace {

namespace fs = std::filesystem;

struct Verdict {
  bool pass = true;
  std::string detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail += (detail.empty() ? "" : "; ") + std::string("violated: ") + what;
    }
  }
  void note(const std::string& s) { detail += (detail.empty() ? "" : "; ") + s; }
};

std::string fmt(const char* f, double a) {
  char buf[128];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

std::string fmt(const char* f, double a, double b) {
  char buf[128];
  std::snprintf(buf, sizeof buf, f, a, b);
  return buf;
}

std::string fmt(const char* f, double a, double b, double c) {
  char buf[160];
  std::snprintf(buf, sizeof buf, f, a, b, c);
  return buf;
}

// The shipped desk configuration on the default generated corpus.
struct Desk {
  fs::path dir;
  RunConfig config;
  PreparedRun run;
  Corpus public_split;
};

Desk make_desk() {
  Desk d;
  d.dir = fs::temp_directory_path() / "dpopd_acceptance";
  fs::remove_all(d.dir);
  GenDataOptions gen;
  gen.out_dir = (d.dir / "data").string();
  std::ostringstream sink;
  cmd_gen_data(gen, sink);
  RunConfig& c = d.config;
  c.data.train = (d.dir / "data" / "train.tsv").string();
  c.data.valid = (d.dir / "data" / "valid.tsv").string();
  c.data.test = (d.dir / "data" / "test.tsv").string();
  c.dp.epsilon_target = 2.0;
  c.dp.q = 0.01;
  c.dp.steps = 2000;
  c.run.out_dir = (d.dir / "run").string();
  d.run = prepare_run(c);
  d.public_split = read_corpus(d.dir / "data" / "public.tsv");
  return d;
}

// ---------------------------------------------------------------------------

double linear_probe(const Params& p, const TokenSeq& seq, const std::vector<bool>& mask,
                    const std::vector<Vector>& w) {
  double s = 0.0;
  std::size_t n = 0;
  for (std::size_t t = 0; t < seq.size(); ++t) {
    if (!mask[t]) continue;
    ++n;
    const Vector z = logits_at(p, seq, t);
    for (std::size_t v = 0; v < z.size(); ++v) s += w[t][v] * z[v];
  }
  return n ? s / static_cast<double>(n) : 0.0;
}

// |a - n| / max(|a|, |n|, floor): entries below the floor, where difference
// round-off dominates, are compared on an absolute scale.
double relative_error(const Vector& analytic, const Vector& numeric, double floor) {
  double worst = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double den = std::max({std::abs(analytic[i]), std::abs(numeric[i]), floor});
    worst = std::max(worst, std::abs(analytic[i] - numeric[i]) / den);
  }
  return worst;
}

Verdict gradient_exactness() {
  Verdict v;
  RngStream rng(41, "acceptance-fd");
  const ModelConfig mc{12, 4, 3, 5};
  double model_worst = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    RngStream init = rng.fork(static_cast<std::uint64_t>(trial));
    const Params p = init_params(mc, 0.8, init);
    TokenSeq seq{static_cast<Token>(3 + trial % 2), 1};
    for (int t = 0; t < 7; ++t) seq.push_back(static_cast<Token>(5 + rng() % 7));
    const std::vector<bool> mask = continuation_mask(seq.size(), 4);
    std::vector<Vector> w(seq.size(), Vector(12));
    for (auto& row : w) {
      for (double& x : row) x = rng.normal();
    }
    const Vector analytic = per_example_grad(p, seq, mask, w);
    const auto f = [&](const oracle::Vec& flat) { return linear_probe(Params(mc, flat), seq, mask, w); };
    model_worst = std::max(model_worst, relative_error(analytic, oracle::fd_gradient(f, p.vector(), 1e-5), 1e-8));
  }
  v.require(model_worst <= 1e-4, "model backprop relative error <= 1e-4");

  double loss_worst = 0.0;
  for (Divergence fam : {Divergence::kLinearKl, Divergence::kGeneralizedJsd}) {
    for (int trial = 0; trial < 20; ++trial) {
      Vector z(7), zt(7);
      for (double& x : z) x = 2.0 * rng.normal();
      for (double& x : zt) x = 2.0 * rng.normal();
      const Vector lt = log_softmax(zt, 1.0);
      const DistillConfig c{0.05 + 0.9 * rng.uniform(), 0.5 + rng.uniform(), fam, 0.0};
      const TokenLoss l = gkd_token_loss(z, lt, c);
      const auto f = [&](const oracle::Vec& x) { return gkd_token_loss(x, lt, c).loss; };
      loss_worst = std::max(loss_worst, relative_error(l.grad, oracle::fd_gradient(f, z, 1e-6), 1e-4));
    }
  }
  v.require(loss_worst <= 1e-5, "loss-to-logit relative error <= 1e-5");
  v.note(fmt("model max rel err %.2e over 20 trials, loss max rel err %.2e over 40 trials", model_worst,
             loss_worst));
  return v;
}

Verdict divergence_endpoints() {
  Verdict v;
  RngStream rng(42, "acceptance-div");
  double worst_fwd = 0.0, worst_rev = 0.0, worst_jsd = 0.0;
  for (int i = 0; i < 1000; ++i) {
    Vector z(6), zt(6);
    for (double& x : z) x = 2.0 * rng.normal();
    for (double& x : zt) x = 2.0 * rng.normal();
    const Vector lt = log_softmax(zt, 1.0);
    const oracle::Vec ps = oracle::softmax(z), pt = oracle::softmax(zt);
    const auto loss = [&](double beta, Divergence fam) { return gkd_token_loss(z, lt, {beta, 1.0, fam, 0.0}).loss; };
    worst_fwd = std::max(worst_fwd, std::abs(loss(0.0, Divergence::kLinearKl) - oracle::kl(pt, ps)));
    worst_rev = std::max(worst_rev, std::abs(loss(1.0, Divergence::kLinearKl) - oracle::kl(ps, pt)));
    worst_jsd = std::max(worst_jsd, std::abs(loss(0.5, Divergence::kGeneralizedJsd) - oracle::jsd(pt, ps)));
  }
  v.require(worst_fwd <= 1e-12, "beta=0 equals KL(pT||pS)");
  v.require(worst_rev <= 1e-12, "beta=1 equals KL(pS||pT)");
  v.require(worst_jsd <= 1e-12, "generalized-jsd at 0.5 equals JSD");

  const double ln2 = gkd_token_loss(Vector{0.0, 0.0}, Vector{0.0, std::log(1e-300)}, {0.0, 1.0, Divergence::kLinearKl, 0.0}).loss;
  const double half_ln3 = gkd_token_loss(Vector{std::log(0.25), std::log(0.75)},
                                         Vector{std::log(0.75), std::log(0.25)}, {0.5, 1.0, Divergence::kLinearKl, 0.0})
                              .loss;
  v.require(ln2 == std::log(2.0), "worked value ln 2");
  v.require(std::abs(half_ln3 - 0.5 * std::log(3.0)) <= 2e-16, "worked value 0.5 ln 3");
  v.note(fmt("1000 pairs: fwd %.1e, rev %.1e, jsd %.1e", worst_fwd, worst_rev, worst_jsd));
  v.note(fmt("ln2 err %.1e, 0.5ln3 err %.1e", std::abs(ln2 - std::log(2.0)), std::abs(half_ln3 - 0.5 * std::log(3.0))));
  return v;
}

Verdict dp_mechanism(const Desk& d) {
  Verdict v;
  TrainConfig c = d.run.train;
  c.dp.steps = 500;
  c.dp.learning_rate = 1.0;
  const TrainResult r = train(c, d.run.data, &*d.run.teacher);
  v.require(r.max_clipped_norm <= c.dp.clip_norm + 1e-9, "post-clip norm <= C + 1e-9");
  v.note(fmt("500 steps: max post-clip norm %.12f", r.max_clipped_norm));

  // Substitution sensitivity with real per-example gradients.
  RngStream rng(43, "acceptance-sens");
  const Params& params = r.params;
  const TeacherHandle& teacher = *d.run.teacher;
  const DistillConfig loss = c.effective_distill();
  double worst = 0.0;
  const std::size_t N = d.run.data.num_train();
  for (int batch = 0; batch < 100; ++batch) {
    RngStream sub = rng.fork(static_cast<std::uint64_t>(batch));
    const auto ids = poisson_subsample(N, 0.01, sub);
    const bool on_policy = rng.uniform() < 0.5;
    auto grad_of = [&](std::size_t id) {
      RngStream rs = sub.fork(id);
      return clip_gradient(detail::example_gradient(params, &teacher, d.run.data.train.examples[id], on_policy, c, loss, rs).grad,
                           c.dp.clip_norm);
    };
    Vector before(params.size(), 0.0), after(params.size(), 0.0);
    const std::size_t swap = static_cast<std::size_t>(rng.uniform() * static_cast<double>(N)) % N;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      const Vector g = grad_of(ids[k]);
      const Vector h = k == 0 ? grad_of(swap) : g;
      for (std::size_t j = 0; j < g.size(); ++j) {
        before[j] += g[j];
        after[j] += h[j];
      }
    }
    for (std::size_t j = 0; j < before.size(); ++j) before[j] -= after[j];
    worst = std::max(worst, l2_norm(before));
  }
  v.require(worst <= 2.0 * c.dp.clip_norm + 1e-9, "substitution sensitivity <= 2C");
  v.note(fmt("sensitivity max %.6f over 100 batches", worst));

  // sigma = 0, q = 1, C huge: plain full-batch gradient descent.
  SplitCorpus tiny = d.run.data;
  tiny.train.examples.resize(40);
  TrainConfig gd = c;
  gd.method = Method::kDpSgdOnly;
  gd.dp.noise_multiplier = 0.0;
  gd.dp.non_private = true;
  gd.dp.sampling_rate = 1.0;
  gd.dp.clip_norm = 1e12;
  gd.dp.steps = 10;
  RngStream init(gd.dp.seed, streams::kInit);
  Params ref = init_params(gd.student, gd.init_scale, init);
  const auto V = static_cast<std::size_t>(gd.student.vocab_size);
  double step_worst = 0.0;
  train(gd, tiny, nullptr, [&](const StepRecord&, const Params&, const NoisedUpdate&, const Params& after) {
    Vector sum(ref.size(), 0.0);
    for (const Example& ex : tiny.train.examples) {
      const ModelInput in = build_model_input(ex);
      TokenSeq seq = in.tokens;
      seq.insert(seq.end(), ex.reference.begin(), ex.reference.end());
      const std::vector<bool> mask = continuation_mask(seq.size(), in.continuation_offset);
      std::vector<Vector> dz(seq.size(), Vector(V, 0.0));
      for (std::size_t t = 0; t < seq.size(); ++t) {
        if (!mask[t]) continue;
        const oracle::Vec p = oracle::softmax(logits_at(ref, seq, t));
        for (std::size_t k = 0; k < V; ++k) dz[t][k] = p[k];
        dz[t][static_cast<std::size_t>(seq[t])] -= 1.0;
      }
      const Vector g = per_example_grad(ref, seq, mask, dz);
      for (std::size_t j = 0; j < g.size(); ++j) sum[j] += g[j];
    }
    Vector flat = ref.vector();
    for (std::size_t j = 0; j < flat.size(); ++j) flat[j] -= gd.dp.learning_rate * (sum[j] * (1.0 / 40.0));
    ref = Params(gd.student, std::move(flat));
    for (std::size_t j = 0; j < flat.size(); ++j) {
      step_worst = std::max(step_worst, std::abs(ref.vector()[j] - after.vector()[j]));
    }
  });
  v.require(step_worst <= 1e-12, "non-private reduction matches gradient descent within 1e-12");
  v.note(fmt("GD reduction max abs diff %.1e over 10 steps", step_worst));
  return v;
}

Verdict accountant() {
  Verdict v;
  double worst = 0.0;
  for (double sigma : {0.5, 1.0, 5.0, 30.0}) {
    for (std::uint64_t steps : {1u, 100u, 2000u}) {
      const double want = oracle::gaussian_epsilon(sigma, steps, 1e-5);
      worst = std::max(worst, std::abs(account(1.0, sigma, steps, 1e-5).epsilon - want) / want);
    }
  }
  v.require(worst <= 1e-9, "q=1 equals Gaussian closed form");
  int violations = 0;
  const double qs[] = {0.005, 0.01, 0.05}, sigmas[] = {0.8, 1.0, 2.0};
  const std::uint64_t us[] = {100, 1000};
  auto eps = [&](int a, int b, int c) { return account(qs[a], sigmas[b], us[c], 1e-5).epsilon; };
  for (int a = 0; a < 3; ++a) {
    for (int b = 0; b < 3; ++b) {
      for (int c = 0; c < 2; ++c) {
        if (c < 1 && eps(a, b, c) > eps(a, b, c + 1)) ++violations;
        if (a < 2 && eps(a, b, c) > eps(a + 1, b, c)) ++violations;
        if (b < 2 && eps(a, b, c) < eps(a, b + 1, c)) ++violations;
      }
    }
  }
  v.require(violations == 0, "monotonicity grid");
  std::string trips;
  for (double target : {0.5, 2.0, 8.0}) {
    const CalibrationResult cal = calibrate_sigma(0.01, 2000, target, 1.0 / 2000);
    const double e = account(0.01, cal.sigma, 2000, 1.0 / 2000).epsilon;
    v.require(e <= target && e >= 0.99 * target, "calibration round trip at " + fmt("%g", target));
    trips += fmt(" %g->%.4f", target, e / target);
  }
  v.note(fmt("closed-form rel err %.1e, monotonicity violations %.0f", worst, violations));
  v.note("round trip ratios" + trips);
  return v;
}

Verdict algorithm_behavior(const Desk& d) {
  Verdict v;
  std::string freqs;
  for (double lambda : {0.0, 0.25, 0.5, 1.0}) {
    TrainConfig c = d.run.train;
    c.lambda = lambda;
    c.dry_run = true;
    c.dp.steps = 10000;
    const TrainResult r = train(c, d.run.data, &*d.run.teacher);
    std::size_t on = 0;
    const PrivacyLedger base(c.dp.sampling_rate, c.dp.noise_multiplier, c.effective_delta(d.run.data.num_train()));
    std::size_t eps_mismatch = 0;
    for (const StepRecord& s : r.steps) {
      on += s.on_policy ? 1 : 0;
      if (s.epsilon != epsilon_at(compose(base, s.step)).epsilon) ++eps_mismatch;
    }
    const double f = static_cast<double>(on) / 10000.0;
    v.require(std::abs(f - lambda) <= 0.02, "branch frequency at lambda " + fmt("%g", lambda));
    v.require(eps_mismatch == 0, "reported epsilon equals ledger");
    freqs += fmt(" %g:%.4f", lambda, f);
  }
  TrainConfig c = d.run.train;
  c.dp.steps = 300;
  c.distill.gamma = 0.5;
  const TrainResult r = train(c, d.run.data, &*d.run.teacher);
  v.require(r.mask_violations == 0, "zero prompt-position gradients");
  std::size_t on = 0;
  for (const StepRecord& s : r.steps) on += s.on_policy ? 1 : 0;
  v.note("on-policy fraction over 1e4 dry steps" + freqs);
  v.note(fmt("mask violations %.0f over 300 live steps (%.0f on-policy)", static_cast<double>(r.mask_violations),
             static_cast<double>(on)));
  return v;
}

Verdict determinism(const Desk& d) {
  Verdict v;
  TrainConfig c = d.run.train;
  c.method = Method::kDpOpd;
  c.eval_interval = 500;
  const TrainResult a = train(c, d.run.data, &*d.run.teacher);
  const TrainResult b = train(c, d.run.data, &*d.run.teacher);
  v.require(a.params.vector() == b.params.vector(), "bit-identical parameters");
  v.require(metrics_jsonl(a) == metrics_jsonl(b), "identical metrics logs");
  v.note(fmt("%.0f steps", static_cast<double>(a.steps.size())) + ", params hash " + hex64(a.params.hash()));
  return v;
}

Verdict method_ordering(const Desk& d) {
  Verdict v;
  const std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  const EvalOptions eval{1, d.run.train.max_new_tokens};
  const auto rows = run_comparison(d.run.train, d.run.data, *d.run.teacher, seeds, eval);
  const MethodStats sgd = summarize(rows, Method::kDpSgdOnly);
  const MethodStats off = summarize(rows, Method::kOffPolicyDpKd);
  const MethodStats opd = summarize(rows, Method::kDpOpd);
  bool same_eps = true;
  for (const RunSummary& r : rows) same_eps = same_eps && r.epsilon == rows.front().epsilon;
  v.require(same_eps, "matched epsilon across methods");
  v.require(rows.front().epsilon <= 2.0, "epsilon <= 2");
  v.require(opd.ppl_mean <= off.ppl_mean, "dp-opd PPL <= offpolicy-dpkd PPL");
  v.require(off.ppl_mean <= sgd.ppl_mean, "offpolicy-dpkd PPL <= dpsgd-only PPL");
  const double gain = 1.0 - opd.ppl_mean / sgd.ppl_mean;
  v.require(gain >= 0.02, "dp-opd at least 2% below dpsgd-only");
  v.require(opd.kl_mean < off.kl_mean, "dp-opd rollout KL < offpolicy-dpkd");
  v.note(fmt("eps %.4f, sigma %.4f", rows.front().epsilon, d.run.dp.sigma));
  v.note(fmt("PPL dpsgd-only %.3f, offpolicy-dpkd %.3f, dp-opd %.3f", sgd.ppl_mean, off.ppl_mean, opd.ppl_mean));
  v.note(fmt("rollout KL dpsgd-only %.4f, offpolicy-dpkd %.4f, dp-opd %.4f", sgd.kl_mean, off.kl_mean, opd.kl_mean));
  v.note(fmt("dp-opd gain over dpsgd-only %.2f%%", 100.0 * gain));
  std::printf("%s", comparison_csv(rows).c_str());
  return v;
}

Verdict beta_sweep(const Desk& d) {
  Verdict v;
  TrainConfig c = d.run.train;
  c.lambda = 1.0;
  const auto rows = run_beta_sweep(c, d.run.data, *d.run.teacher, {0.0, 0.3, 0.5, 0.7, 1.0});
  v.require(rows.size() == 5, "one row per beta");
  std::string table;
  double best = 0.0, best_ppl = INFINITY;
  for (const BetaSweepRow& r : rows) {
    v.require(std::isfinite(r.ppl_test), "finite PPL");
    table += fmt(" %g:%.3f", r.beta, r.ppl_test);
    if (r.ppl_test < best_ppl) {
      best_ppl = r.ppl_test;
      best = r.beta;
    }
  }
  v.note("beta:PPL" + table);
  v.note(fmt("observed best beta %g", best));
  return v;
}

Verdict evaluation_oracles(const Desk& d) {
  Verdict v;
  const Params uniform(d.run.train.student);
  const double u = evaluate_perplexity(uniform, d.run.data.test);
  const double V = d.run.train.student.vocab_size;
  v.require(std::abs(u - V) <= 1e-9, "uniform PPL equals V");
  const TeacherHandle& oracle_teacher = *d.run.teacher;
  const double got = evaluate_perplexity(oracle_teacher, d.run.data.test);
  RngStream cs(d.run.data.train.header.seed, streams::kChain);
  const MarkovChainSpec chain = generate_chain(d.run.data.train.header.vocab(), d.run.data.train.header.order,
                                               d.config.teacher.concentration, cs);
  const double want = oracle::chain_perplexity(chain, d.run.data.test);
  v.require(std::abs(got / want - 1.0) <= 0.03, "oracle teacher PPL within 3% of chain entropy");
  RngStream ts(1, "teacher");
  const Params teacher = train_teacher_public(d.public_split, d.run.train.student, TeacherTrainOptions{}, ts);
  const double tv = evaluate_perplexity(teacher, d.run.data.valid);
  v.require(tv < V, "public teacher beats uniform");
  v.note(fmt("uniform %.12f, oracle %.4f vs chain %.4f", u, got, want));
  v.note(fmt("public teacher valid PPL %.3f", tv));
  return v;
}

}  // namespace
}  // namespace dpopd

int main() {
  using namespace dpopd;
  std::setvbuf(stdout, nullptr, _IOLBF, 0);
  const auto t0 = std::chrono::steady_clock::now();
  const Desk desk = make_desk();
  std::printf("desk setup: N=%zu sigma=%.4f q=%g steps=%llu delta=%g lr=%g L=%zu\n", desk.run.data.num_train(),
              desk.run.dp.sigma, desk.run.dp.q, static_cast<unsigned long long>(desk.run.dp.steps), desk.run.dp.delta,
              desk.run.train.dp.learning_rate, desk.run.train.max_new_tokens);

  const std::vector<std::pair<const char*, std::function<Verdict()>>> criteria{
      {"gradient exactness", [] { return gradient_exactness(); }},
      {"divergence endpoints", [] { return divergence_endpoints(); }},
      {"DP mechanism", [&] { return dp_mechanism(desk); }},
      {"accountant", [] { return accountant(); }},
      {"training loop behavior", [&] { return algorithm_behavior(desk); }},
      {"determinism", [&] { return determinism(desk); }},
      {"method ordering", [&] { return method_ordering(desk); }},
      {"beta sweep", [&] { return beta_sweep(desk); }},
      {"evaluation oracles", [&] { return evaluation_oracles(desk); }},
  };
  int failures = 0;
  int index = 0;
  for (const auto& [name, check] : criteria) {
    ++index;
    const auto start = std::chrono::steady_clock::now();
    Verdict v;
    try {
      v = check();
    } catch (const std::exception& e) {
      v.pass = false;
      v.detail = std::string("exception: ") + e.what();
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::printf("criterion %d (%s): %s [%.1fs] %s\n", index, name, v.pass ? "PASS" : "FAIL", secs, v.detail.c_str());
    failures += v.pass ? 0 : 1;
  }
  std::filesystem::remove_all(desk.dir);
  const double total = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::printf("%d of %zu criteria passed in %.1fs\n", static_cast<int>(criteria.size()) - failures, criteria.size(),
              total);
  return failures == 0 ? 0 : 1;
}
