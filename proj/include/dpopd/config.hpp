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

// Run configuration files. Example:
//
//   {
//     "schema_version": 1,
//     "data": {"train": "data/train.tsv", "valid": "data/valid.tsv", "test": "data/test.tsv"},
//     "model": {"student": {"context": 4, "embed": 8, "hidden": 32, "init_scale": 0.05},
//               "teacher": {"kind": "oracle", "concentration": 0.5}},
//     "distill": {"beta": 0.5, "tau_d": 1.0, "family": "linear-kl", "gamma": 0.0},
//     "dp": {"epsilon_target": 2.0, "C": 1.0, "q": 0.01, "steps": 2000, "lr": 1.0},
//     "rollout": {"lambda": 0.5, "max_new_tokens": 32, "temperature": 1.0},
//     "run": {"method": "dp-opd", "seed": 1, "deterministic": true, "eval_interval": 0,
//             "out_dir": "runs/dp-opd"}
//   }
//
// Unknown keys are rejected. dp takes exactly one of sigma / epsilon_target,
// one of q / B and one of steps / epochs; delta defaults to 1/N.

#ifndef DPOPD_CONFIG_HPP_
#define DPOPD_CONFIG_HPP_

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>

#include <nlohmann/json.hpp>

#include "dpopd/accountant.hpp"
#include "dpopd/data.hpp"
#include "dpopd/distill.hpp"
#include "dpopd/model.hpp"
#include "dpopd/trainer.hpp"

namespace dpopd {

inline constexpr int kSchemaVersion = 1;

class ConfigError : public std::runtime_error {
 public:
  ConfigError(const std::string& field, const std::string& what)
      : std::runtime_error(field.empty() ? what : field + ": " + what), field_(field) {}
  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

struct RunConfig {
  int schema_version = kSchemaVersion;

  struct Data {
    std::string train, valid, test;
    friend bool operator==(const Data&, const Data&) = default;
  } data;

  struct Student {
    int context = 4;
    int embed = 8;
    int hidden = 32;
    double init_scale = 0.05;
    friend bool operator==(const Student&, const Student&) = default;
  } student;

  struct Teacher {
    std::string kind = "oracle";  // oracle | neural
    std::string path;             // neural only
    double concentration = 0.5;   // oracle only
    bool deterministic_chain = false;
    friend bool operator==(const Teacher&, const Teacher&) = default;
  } teacher;

  struct Distill {
    double beta = 0.5;
    double tau_d = 1.0;
    std::string family = "linear-kl";
    double gamma = 0.0;
    friend bool operator==(const Distill&, const Distill&) = default;
  } distill;

  struct Dp {
    std::optional<double> epsilon_target;
    std::optional<double> sigma;
    std::optional<double> delta;
    double clip = 1.0;
    std::optional<double> q;
    std::optional<double> batch;
    std::optional<std::uint64_t> steps;
    std::optional<double> epochs;
    double lr = 1.0;
    friend bool operator==(const Dp&, const Dp&) = default;
  } dp;

  struct Rollout {
    double lambda = 0.5;
    std::uint64_t max_new_tokens = 32;
    double temperature = 1.0;
    friend bool operator==(const Rollout&, const Rollout&) = default;
  } rollout;

  struct Run {
    std::string method = "dp-opd";
    std::uint64_t seed = 0;
    bool deterministic = true;
    std::uint64_t eval_interval = 0;
    std::uint64_t eval_rollouts = 1;
    std::string out_dir = "runs/default";
    friend bool operator==(const Run&, const Run&) = default;
  } run;

  friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

namespace detail {

// Reads an object's keys, rejecting anything not consumed.
class ObjectReader {
 public:
  ObjectReader(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_, "expected an object");
  }

  bool has(const std::string& key) const { return j_.contains(key) && !j_.at(key).is_null(); }

  const nlohmann::json& object(const std::string& key) {
    seen_.insert(key);
    if (!j_.contains(key)) throw ConfigError(field(key), "required section missing");
    return j_.at(key);
  }

  template <typename T>
  void get(const std::string& key, T& out, bool required = false) {
    seen_.insert(key);
    if (!has(key)) {
      if (required) throw ConfigError(field(key), "required field missing");
      return;
    }
    out = convert<T>(key);
  }

  template <typename T>
  void get(const std::string& key, std::optional<T>& out) {
    seen_.insert(key);
    if (has(key)) out = convert<T>(key);
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) throw ConfigError(field(it.key()), "unknown key");
    }
  }

  std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

 private:
  template <typename T>
  T convert(const std::string& key) const {
    const nlohmann::json& v = j_.at(key);
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError(field(key), "expected a boolean");
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw ConfigError(field(key), "expected a string");
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) throw ConfigError(field(key), "expected an integer");
      if (std::is_unsigned_v<T> && v.is_number_integer() && !v.is_number_unsigned() && v.get<std::int64_t>() < 0) {
        throw ConfigError(field(key), "expected a non-negative integer");
      }
    } else {
      if (!v.is_number()) throw ConfigError(field(key), "expected a number");
    }
    return v.get<T>();
  }

  const nlohmann::json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

}  // namespace detail

inline RunConfig parse_run_config(const nlohmann::json& j) {
  RunConfig c;
  detail::ObjectReader top(j, "");
  top.get("schema_version", c.schema_version, true);
  if (c.schema_version != kSchemaVersion) {
    throw ConfigError("schema_version", "unsupported version " + std::to_string(c.schema_version));
  }
  {
    detail::ObjectReader r(top.object("data"), "data");
    r.get("train", c.data.train, true);
    r.get("valid", c.data.valid, true);
    r.get("test", c.data.test, true);
    r.finish();
  }
  {
    detail::ObjectReader model(top.object("model"), "model");
    detail::ObjectReader s(model.object("student"), "model.student");
    s.get("context", c.student.context);
    s.get("embed", c.student.embed);
    s.get("hidden", c.student.hidden);
    s.get("init_scale", c.student.init_scale);
    s.finish();
    if (model.has("teacher")) {
      detail::ObjectReader t(model.object("teacher"), "model.teacher");
      t.get("kind", c.teacher.kind);
      t.get("path", c.teacher.path);
      t.get("concentration", c.teacher.concentration);
      t.get("deterministic_chain", c.teacher.deterministic_chain);
      t.finish();
      if (c.teacher.kind != "oracle" && c.teacher.kind != "neural") {
        throw ConfigError("model.teacher.kind", "must be \"oracle\" or \"neural\"");
      }
      if (c.teacher.kind == "neural" && c.teacher.path.empty()) {
        throw ConfigError("model.teacher.path", "required for a neural teacher");
      }
    } else {
      model.object("teacher");  // marks as seen; absent teacher handled below
    }
    model.finish();
  }
  {
    detail::ObjectReader r(top.object("distill"), "distill");
    r.get("beta", c.distill.beta);
    r.get("tau_d", c.distill.tau_d);
    r.get("family", c.distill.family);
    r.get("gamma", c.distill.gamma);
    r.finish();
    try {
      DistillConfig{c.distill.beta, c.distill.tau_d, divergence_from_string(c.distill.family), c.distill.gamma}
          .validate();
    } catch (const std::invalid_argument& e) {
      throw ConfigError("distill", e.what());
    }
  }
  {
    detail::ObjectReader r(top.object("dp"), "dp");
    r.get("epsilon_target", c.dp.epsilon_target);
    r.get("sigma", c.dp.sigma);
    r.get("delta", c.dp.delta);
    r.get("C", c.dp.clip);
    r.get("q", c.dp.q);
    r.get("B", c.dp.batch);
    r.get("steps", c.dp.steps);
    r.get("epochs", c.dp.epochs);
    r.get("lr", c.dp.lr);
    r.finish();
    if (c.dp.epsilon_target.has_value() == c.dp.sigma.has_value()) {
      throw ConfigError("dp", "exactly one of \"sigma\" and \"epsilon_target\" is required");
    }
    if (c.dp.q.has_value() == c.dp.batch.has_value()) {
      throw ConfigError("dp", "exactly one of \"q\" and \"B\" is required");
    }
    if (c.dp.steps.has_value() == c.dp.epochs.has_value()) {
      throw ConfigError("dp", "exactly one of \"steps\" and \"epochs\" is required");
    }
    if (c.dp.epsilon_target && !(*c.dp.epsilon_target > 0.0)) throw ConfigError("dp.epsilon_target", "must be > 0");
    if (c.dp.sigma && !(*c.dp.sigma >= 0.0)) throw ConfigError("dp.sigma", "must be >= 0");
    if (c.dp.delta && !(*c.dp.delta > 0.0 && *c.dp.delta < 1.0)) throw ConfigError("dp.delta", "must be in (0, 1)");
    if (!(c.dp.clip > 0.0)) throw ConfigError("dp.C", "must be > 0");
    if (c.dp.q && !(*c.dp.q > 0.0 && *c.dp.q <= 1.0)) throw ConfigError("dp.q", "must be in (0, 1]");
    if (c.dp.batch && !(*c.dp.batch > 0.0)) throw ConfigError("dp.B", "must be > 0");
    if (c.dp.epochs && !(*c.dp.epochs > 0.0)) throw ConfigError("dp.epochs", "must be > 0");
    if (!(c.dp.lr >= 0.0)) throw ConfigError("dp.lr", "must be >= 0");
  }
  {
    detail::ObjectReader r(top.object("rollout"), "rollout");
    r.get("lambda", c.rollout.lambda);
    r.get("max_new_tokens", c.rollout.max_new_tokens);
    r.get("temperature", c.rollout.temperature);
    r.finish();
    if (!(c.rollout.lambda >= 0.0 && c.rollout.lambda <= 1.0)) throw ConfigError("rollout.lambda", "must be in [0, 1]");
    if (c.rollout.max_new_tokens < 1) throw ConfigError("rollout.max_new_tokens", "must be >= 1");
    if (!(c.rollout.temperature > 0.0)) throw ConfigError("rollout.temperature", "must be > 0");
  }
  {
    detail::ObjectReader r(top.object("run"), "run");
    r.get("method", c.run.method);
    r.get("seed", c.run.seed);
    r.get("deterministic", c.run.deterministic);
    r.get("eval_interval", c.run.eval_interval);
    r.get("eval_rollouts", c.run.eval_rollouts);
    r.get("out_dir", c.run.out_dir);
    r.finish();
    try {
      method_from_string(c.run.method);
    } catch (const std::invalid_argument& e) {
      throw ConfigError("run.method", e.what());
    }
    if (c.run.eval_rollouts < 1) throw ConfigError("run.eval_rollouts", "must be >= 1");
  }
  top.finish();
  return c;
}

inline nlohmann::ordered_json to_json(const RunConfig& c) {
  nlohmann::ordered_json j;
  j["schema_version"] = c.schema_version;
  j["data"] = {{"train", c.data.train}, {"valid", c.data.valid}, {"test", c.data.test}};
  nlohmann::ordered_json teacher;
  teacher["kind"] = c.teacher.kind;
  if (c.teacher.kind == "neural") {
    teacher["path"] = c.teacher.path;
  } else {
    teacher["concentration"] = c.teacher.concentration;
    teacher["deterministic_chain"] = c.teacher.deterministic_chain;
  }
  j["model"] = {{"student",
                 {{"context", c.student.context},
                  {"embed", c.student.embed},
                  {"hidden", c.student.hidden},
                  {"init_scale", c.student.init_scale}}},
                {"teacher", teacher}};
  j["distill"] = {{"beta", c.distill.beta},
                  {"tau_d", c.distill.tau_d},
                  {"family", c.distill.family},
                  {"gamma", c.distill.gamma}};
  nlohmann::ordered_json dp;
  if (c.dp.epsilon_target) dp["epsilon_target"] = *c.dp.epsilon_target;
  if (c.dp.sigma) dp["sigma"] = *c.dp.sigma;
  if (c.dp.delta) dp["delta"] = *c.dp.delta;
  dp["C"] = c.dp.clip;
  if (c.dp.q) dp["q"] = *c.dp.q;
  if (c.dp.batch) dp["B"] = *c.dp.batch;
  if (c.dp.steps) dp["steps"] = *c.dp.steps;
  if (c.dp.epochs) dp["epochs"] = *c.dp.epochs;
  dp["lr"] = c.dp.lr;
  j["dp"] = dp;
  j["rollout"] = {{"lambda", c.rollout.lambda},
                  {"max_new_tokens", c.rollout.max_new_tokens},
                  {"temperature", c.rollout.temperature}};
  j["run"] = {{"method", c.run.method},
              {"seed", c.run.seed},
              {"deterministic", c.run.deterministic},
              {"eval_interval", c.run.eval_interval},
              {"eval_rollouts", c.run.eval_rollouts},
              {"out_dir", c.run.out_dir}};
  return j;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("", "cannot open config file " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(f);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("", path.string() + ": invalid JSON: " + e.what());
  }
  return parse_run_config(j);
}

/// Makes data and teacher paths absolute relative to `base`.
inline RunConfig absolutize_paths(RunConfig c, const std::filesystem::path& base) {
  auto fix = [&base](std::string& p) {
    if (!p.empty() && std::filesystem::path(p).is_relative()) p = std::filesystem::weakly_canonical(base / p).string();
  };
  fix(c.data.train);
  fix(c.data.valid);
  fix(c.data.test);
  fix(c.teacher.path);
  return c;
}

/// Derived DP quantities once N is known.
struct ResolvedDp {
  double sigma = 0.0;
  double q = 0.0;
  std::uint64_t steps = 0;
  double delta = 0.0;
  bool calibrated = false;
  bool sigma_at_lower_bound = false;
  double epsilon = 0.0;
  int best_alpha = kMinOrder;
};

inline ResolvedDp resolve_dp(const RunConfig& c, std::size_t num_train) {
  if (num_train == 0) throw ConfigError("data.train", "training split is empty");
  ResolvedDp r;
  const double N = static_cast<double>(num_train);
  r.q = c.dp.q ? *c.dp.q : *c.dp.batch / N;
  if (!(r.q > 0.0 && r.q <= 1.0)) throw ConfigError("dp.B", "B / N must be in (0, 1]");
  r.steps = c.dp.steps ? *c.dp.steps : static_cast<std::uint64_t>(std::ceil(*c.dp.epochs / r.q));
  r.delta = c.dp.delta ? *c.dp.delta : 1.0 / N;
  if (c.dp.epsilon_target) {
    const CalibrationResult cal = calibrate_sigma(r.q, r.steps, *c.dp.epsilon_target, r.delta);
    r.sigma = cal.sigma;
    r.calibrated = true;
    r.sigma_at_lower_bound = cal.at_lower_bound;
  } else {
    r.sigma = *c.dp.sigma;
  }
  if (r.sigma > 0.0) {
    const EpsilonResult e = account(r.q, r.sigma, r.steps, r.delta);
    r.epsilon = e.epsilon;
    r.best_alpha = e.best_alpha;
  } else {
    r.epsilon = std::numeric_limits<double>::infinity();
  }
  return r;
}

/// The config with every derived quantity pinned (sigma, q, steps, delta), so
/// that re-running it skips calibration and reproduces the run.
inline RunConfig resolved_snapshot(RunConfig c, const ResolvedDp& r) {
  c.dp.epsilon_target.reset();
  c.dp.sigma = r.sigma;
  c.dp.batch.reset();
  c.dp.q = r.q;
  c.dp.epochs.reset();
  c.dp.steps = r.steps;
  c.dp.delta = r.delta;
  return c;
}

inline TrainConfig to_train_config(const RunConfig& c, const ResolvedDp& r, int vocab_size) {
  TrainConfig t;
  t.method = method_from_string(c.run.method);
  t.student = ModelConfig{vocab_size, c.student.context, c.student.embed, c.student.hidden};
  t.init_scale = c.student.init_scale;
  t.distill = DistillConfig{c.distill.beta, c.distill.tau_d, divergence_from_string(c.distill.family),
                            c.distill.gamma};
  t.dp.clip_norm = c.dp.clip;
  t.dp.noise_multiplier = r.sigma;
  t.dp.non_private = r.sigma == 0.0;
  t.dp.sampling_rate = r.q;
  t.dp.learning_rate = c.dp.lr;
  t.dp.steps = r.steps;
  t.dp.seed = c.run.seed;
  t.delta = r.delta;
  t.lambda = c.rollout.lambda;
  t.max_new_tokens = c.rollout.max_new_tokens;
  t.rollout_temperature = c.rollout.temperature;
  t.eval_interval = c.run.eval_interval;
  t.eval_rollouts = c.run.eval_rollouts;
  t.deterministic = c.run.deterministic;
  return t;
}

/// Oracle teachers are rebuilt from the corpus header (seed, sizes) and the
/// configured concentration, then checked against the header's chain hash.
inline TeacherHandle load_teacher(const RunConfig& c, const Corpus& train) {
  if (c.teacher.kind == "neural") {
    if (!std::filesystem::exists(c.teacher.path)) {
      throw ConfigError("model.teacher.path", "teacher file " + c.teacher.path + " does not exist");
    }
    return TeacherHandle::neural(load_params(c.teacher.path));
  }
  RngStream chain_stream(train.header.seed, streams::kChain);
  MarkovChainSpec chain = generate_chain(train.header.vocab(), train.header.order, c.teacher.concentration,
                                         chain_stream, c.teacher.deterministic_chain);
  verify_chain(train, chain);
  return TeacherHandle::oracle(std::move(chain), c.student.context);
}

}  // namespace dpopd

#endif  // DPOPD_CONFIG_HPP_
