// SPDX-License-Identifier: Apache-2.0
//
// sakd: command-line front end.
//
// Exit codes: 0 success, 1 configuration error, 2 numeric failure,
// 3 gradcheck failure.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "sakd/errors.hpp"
#include "sakd/harness/checkpoint.hpp"
#include "sakd/harness/config.hpp"
#include "sakd/harness/dataset.hpp"
#include "sakd/harness/experiment.hpp"
#include "sakd/harness/gradcheck.hpp"

namespace fs = std::filesystem;
using namespace sakd;
using namespace sakd::harness;

namespace {

enum Exit { kOk = 0, kConfig = 1, kNumeric = 2, kCheck = 3 };

struct Common {
  std::string config;
  std::string preset = "desk";
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string strategy;
};

void add_common(CLI::App* cmd, Common& c, bool with_strategy) {
  cmd->add_option("--config", c.config, "JSON config overlaid on the preset");
  cmd->add_option("--preset", c.preset, "base preset")->check(CLI::IsMember({"desk", "paper"}));
  cmd->add_option("--seed", c.seed, "seed override");
  cmd->add_option("--out", c.out, "output directory");
  if (with_strategy) {
    cmd->add_option("--strategy", c.strategy, "adaptive, always, anti, rand or none");
  }
}

ExperimentConfig resolve(const Common& c) {
  ExperimentConfig cfg = load_config(
      c.config.empty() ? std::nullopt : std::optional<fs::path>(c.config), c.preset);
  if (c.seed) cfg.seed = *c.seed;
  if (!c.strategy.empty()) cfg.strategy = parse_strategy(c.strategy);
  if (!c.out.empty()) cfg.output_dir = c.out;
  validate(cfg);
  return cfg;
}

int cmd_gen_data(const Common& c) {
  ExperimentConfig cfg = resolve(c);
  if (c.seed) cfg.dataset.seed = *c.seed;
  const fs::path out = c.out.empty() ? fs::path("runs/data") : fs::path(c.out);
  fs::create_directories(out);
  const Dataset ds = gen_dataset(cfg.dataset);
  write_csv(ds, out / "dataset.csv");
  std::printf("wrote %s (%zu train, %zu test, %zu classes, %zu features)\n",
              (out / "dataset.csv").string().c_str(), ds.train.size(), ds.test.size(), ds.classes,
              ds.input_dim);
  return kOk;
}

int cmd_pretrain(const Common& c) {
  ExperimentConfig cfg = resolve(c);
  if (c.seed) cfg.pretrain.seed = *c.seed;
  const fs::path path =
      c.out.empty() ? fs::path(cfg.teacher_checkpoint) : fs::path(c.out) / "teacher.ckpt.json";
  const PretrainResult r = pretrain_teacher(cfg, path);
  std::printf("teacher: train accuracy %.4f, test accuracy %.4f\nwrote %s\n", r.train_accuracy,
              r.test_accuracy, path.string().c_str());
  return kOk;
}

int cmd_train(const Common& c, const std::string& teacher_mode) {
  ExperimentConfig cfg = resolve(c);
  if (!teacher_mode.empty()) cfg.teacher_mode = parse_teacher_mode(teacher_mode);
  validate(cfg);
  TrainHooks hooks;
  hooks.on_epoch = [](const EpochStats& es) {
    std::printf("epoch %3zu  tau %.3f  lr %.4g  train loss %.4f  train acc %.4f  test acc %.4f\n",
                es.epoch, es.tau, es.lr, es.train.total, es.train.accuracy, es.test.accuracy);
    std::fflush(stdout);
  };
  const RunSummary s = run_experiment(cfg, cfg.output_dir, nullptr, nullptr, hooks);
  std::printf("%s seed %llu: final train accuracy %.4f, test accuracy %.4f (%.1f s)\nwrote %s\n",
              s.strategy.c_str(), static_cast<unsigned long long>(s.seed), s.final_train_accuracy,
              s.final_test_accuracy, s.wall_time_s, cfg.output_dir.c_str());
  return kOk;
}

int cmd_ablate(const Common& c, const std::vector<std::string>& names,
               const std::vector<std::uint64_t>& seeds, std::size_t jobs) {
  Common base = c;
  base.strategy.clear();
  ExperimentConfig cfg = resolve(base);
  if (c.out.empty()) cfg.output_dir = "runs/ablate";
  std::vector<Strategy> strategies;
  if (!c.strategy.empty()) strategies.push_back(parse_strategy(c.strategy));
  for (const auto& n : names) strategies.push_back(parse_strategy(n));
  if (strategies.empty()) strategies.assign(std::begin(kAllStrategies), std::end(kAllStrategies));
  const AblationResult r = ablate(cfg, strategies, seeds, cfg.output_dir, jobs);
  std::fputs(render_ablation_text(r).c_str(), stdout);
  std::printf("wrote %s\n", (fs::path(cfg.output_dir) / "ablation.csv").string().c_str());
  return kOk;
}

int cmd_gradcheck(const std::string& scope) {
  const GradcheckReport r = run_gradcheck(scope);
  std::vector<std::string> scopes =
      scope == "all" ? gradcheck_scopes() : std::vector<std::string>{scope};
  for (const auto& e : r.entries) {
    if (!e.passed) {
      std::printf("FAIL %s/%s: max relative error %.3g (%s)\n", e.scope.c_str(), e.name.c_str(),
                  e.max_rel_error, e.worst.c_str());
    }
  }
  for (const auto& s : scopes) {
    std::size_t checks = 0;
    for (const auto& e : r.entries) checks += e.scope == s;
    std::printf("%-11s %3zu checks  max relative error %.3g\n", s.c_str(), checks,
                r.max_rel_error(s));
  }
  std::printf("%s (tolerance %g)\n", r.passed() ? "PASS" : "FAIL", kGradcheckTolerance);
  return r.passed() ? kOk : kCheck;
}

int cmd_eval(const Common& c, const std::string& checkpoint) {
  Common base = c;
  fs::path ckpt = checkpoint;
  if (!c.out.empty() && c.config.empty()) {
    // A run directory: evaluate its student under its own snapshot.
    base.config = (fs::path(c.out) / "config.json").string();
    base.out.clear();
    if (ckpt.empty()) ckpt = fs::path(c.out) / "student.ckpt.json";
  }
  const ExperimentConfig cfg = resolve(base);
  if (ckpt.empty()) throw UsageError("eval: pass --checkpoint <file> or --out <run directory>");
  const EvalResult r = evaluate_checkpoint(cfg, ckpt);
  std::printf("%s: train accuracy %.4f, test accuracy %.4f\n", ckpt.string().c_str(),
              r.train_accuracy, r.test_accuracy);
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"sakd: spot-adaptive knowledge distillation"};
  app.require_subcommand(1);

  Common gen, pre, tr, ab, ev;
  auto* gen_cmd = app.add_subcommand("gen-data", "write the configured dataset as CSV");
  add_common(gen_cmd, gen, false);

  auto* pre_cmd = app.add_subcommand("pretrain-teacher", "train the teacher with cross-entropy");
  add_common(pre_cmd, pre, false);

  auto* tr_cmd = app.add_subcommand("train", "distill a student");
  add_common(tr_cmd, tr, true);
  std::string teacher_mode;
  tr_cmd->add_option("--teacher-mode", teacher_mode, "frozen, scratch or pretrained");

  auto* ab_cmd = app.add_subcommand("ablate", "run a strategy x seed grid");
  add_common(ab_cmd, ab, true);
  std::vector<std::string> strategies;
  std::vector<std::uint64_t> seeds = {1, 2, 3};
  std::size_t jobs = 1;
  ab_cmd->add_option("--strategies", strategies, "strategies to run (default: all five)");
  ab_cmd->add_option("--seeds", seeds, "seeds (default 1 2 3)");
  ab_cmd->add_option("--jobs", jobs, "runs executed concurrently")->check(CLI::PositiveNumber);

  auto* gc_cmd = app.add_subcommand("gradcheck", "finite-difference gradient verification");
  std::string scope = "all";
  gc_cmd->add_option("--scope", scope, "ops, network, policy, end-to-end or all")
      ->check(CLI::IsMember({"ops", "network", "policy", "end-to-end", "all"}));

  auto* ev_cmd = app.add_subcommand("eval", "accuracy of a checkpoint on the configured data");
  add_common(ev_cmd, ev, false);
  std::string checkpoint;
  ev_cmd->add_option("--checkpoint", checkpoint, "network checkpoint");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }

  try {
    if (*gen_cmd) return cmd_gen_data(gen);
    if (*pre_cmd) return cmd_pretrain(pre);
    if (*tr_cmd) return cmd_train(tr, teacher_mode);
    if (*ab_cmd) return cmd_ablate(ab, strategies, seeds, jobs);
    if (*gc_cmd) return cmd_gradcheck(scope);
    if (*ev_cmd) return cmd_eval(ev, checkpoint);
  } catch (const NumericError& e) {
    std::fprintf(stderr, "numeric error: %s\n", e.what());
    return kNumeric;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kConfig;
  }
  return kOk;
}
