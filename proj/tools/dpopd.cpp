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

// dpopd command-line tool.

#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "dpopd/commands.hpp"

int main(int argc, char** argv) {
  using namespace dpopd;

  CLI::App app{"Differentially private on-policy distillation on synthetic Markov-chain text"};
  app.require_subcommand(1);
  app.fallthrough();

  GlobalOptions global;
  app.add_option("--config", global.config, "Run configuration (JSON)");
  app.add_option("--seed", global.seed, "Root seed; overrides the config");
  app.add_flag("--deterministic", global.deterministic, "Deterministic mode");
  app.add_option("--out-dir", global.out_dir, "Output directory; overrides the config");

  GenDataOptions gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Sample train/valid/test/public corpora from a fresh chain");
  gen_cmd->add_option("--n-train", gen.n_train);
  gen_cmd->add_option("--n-valid", gen.n_valid);
  gen_cmd->add_option("--n-test", gen.n_test);
  gen_cmd->add_option("--n-public", gen.n_public);
  gen_cmd->add_option("--prompt-len", gen.prompt_len);
  gen_cmd->add_option("--total-len", gen.total_len);
  gen_cmd->add_option("--vocab", gen.vocab_size);
  gen_cmd->add_option("--codes", gen.num_codes);
  gen_cmd->add_option("--order", gen.order);
  gen_cmd->add_option("--concentration", gen.concentration);
  gen_cmd->add_flag("--deterministic-chain", gen.deterministic_chain, "One-hot transition rows");

  TrainTeacherOptions teacher;
  auto* teacher_cmd = app.add_subcommand("train-teacher", "Non-private teacher training on the public corpus");
  teacher_cmd->add_option("--public", teacher.public_path)->required();
  teacher_cmd->add_option("--valid", teacher.valid_path, "Report validation perplexity");
  teacher_cmd->add_option("--context", teacher.model.context);
  teacher_cmd->add_option("--embed", teacher.model.embed);
  teacher_cmd->add_option("--hidden", teacher.model.hidden);
  teacher_cmd->add_option("--epochs", teacher.train.epochs);
  teacher_cmd->add_option("--batch", teacher.train.batch_size);
  teacher_cmd->add_option("--lr", teacher.train.learning_rate);

  auto* train_cmd = app.add_subcommand("train", "Train a student from --config");

  EvalCommandOptions eval;
  auto* eval_cmd = app.add_subcommand("eval", "Perplexity and rollout KL of a parameter file");
  eval_cmd->add_option("--params", eval.params_path)->required();
  eval_cmd->add_option("--split", eval.split, "valid or test (with --config)");
  eval_cmd->add_option("--corpus", eval.corpus_path, "Evaluate this corpus file instead");
  eval_cmd->add_option("--rollouts", eval.rollouts, "Rollouts per prompt for the KL probe");

  CompareOptions compare;
  auto* compare_cmd = app.add_subcommand("compare", "All three methods over several seeds");
  compare_cmd->add_option("--seeds", compare.seeds)->delimiter(',')->required();
  compare_cmd->add_option("--rollouts", compare.rollouts);

  SweepBetaOptions sweep;
  auto* sweep_cmd = app.add_subcommand("sweep-beta", "dp-opd students across divergence weights");
  sweep_cmd->add_option("--betas", sweep.betas)->delimiter(',');
  sweep_cmd->add_option("--lambda", sweep.lambda);

  AccountOptions acct;
  auto* account_cmd = app.add_subcommand("account", "Epsilon for (q, sigma, steps, delta)");
  auto* calibrate_cmd = app.add_subcommand("calibrate", "Noise multiplier for a target epsilon");
  for (auto* cmd : {account_cmd, calibrate_cmd}) {
    cmd->add_option("--q", acct.q)->required();
    cmd->add_option("--steps", acct.steps)->required();
    cmd->add_option("--delta", acct.delta);
    cmd->add_option("--n", acct.n, "Dataset size; delta defaults to 1/n");
  }
  account_cmd->add_option("--sigma", acct.sigma)->required();
  calibrate_cmd->add_option("--epsilon", acct.epsilon)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  return run_command(
      [&] {
        if (gen_cmd->parsed()) {
          if (global.seed) gen.seed = *global.seed;
          if (!global.out_dir.empty()) gen.out_dir = global.out_dir;
          cmd_gen_data(gen, std::cout);
        } else if (teacher_cmd->parsed()) {
          teacher.seed = global.seed.value_or(0);
          teacher.out_dir = global.out_dir.empty() ? "teacher" : global.out_dir;
          cmd_train_teacher(teacher, std::cout);
        } else if (train_cmd->parsed()) {
          cmd_train(global, std::cout);
        } else if (eval_cmd->parsed()) {
          cmd_eval(global, eval, std::cout);
        } else if (compare_cmd->parsed()) {
          cmd_compare(global, compare, std::cout);
        } else if (sweep_cmd->parsed()) {
          cmd_sweep_beta(global, sweep, std::cout);
        } else if (account_cmd->parsed()) {
          cmd_account(acct, std::cout);
        } else if (calibrate_cmd->parsed()) {
          cmd_calibrate(acct, std::cout);
        }
      },
      std::cerr);
}
