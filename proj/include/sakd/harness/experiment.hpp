// SPDX-License-Identifier: Apache-2.0
//
// Experiment orchestration: teacher pre-training, single runs, the ablation
// grid and checkpoint evaluation.
//
// A run directory holds exactly four files:
//   metrics.csv        per-epoch metrics (see metrics.hpp)
//   student.ckpt.json  final student
//   config.json        resolved configuration; rerunning from it reproduces the run
//   summary.json       final accuracies and wall time

#pragma once

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "sakd/errors.hpp"
#include "sakd/harness/checkpoint.hpp"
#include "sakd/harness/config.hpp"
#include "sakd/harness/dataset.hpp"
#include "sakd/harness/metrics.hpp"
#include "sakd/trainer.hpp"

namespace sakd::harness {

namespace fs = std::filesystem;

inline void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write '" + path.string() + "'");
  out << text;
}

inline Dataset load_dataset(const ExperimentConfig& cfg) {
  Dataset ds = gen_dataset(cfg.dataset);
  if (ds.train.size() < 2) throw ConfigError("dataset has fewer than 2 training samples");
  return ds;
}

// ---------------------------------------------------------------------------
// Teacher pre-training

struct PretrainResult {
  Network teacher;
  double train_accuracy = 0.0;
  double test_accuracy = 0.0;
  std::vector<double> epoch_loss;
};

/// Plain cross-entropy training of a network.
inline PretrainResult train_classifier(const NetworkSpec& spec, const Dataset& data,
                                       const PretrainSpec& p) {
  PretrainResult out;
  Network net = build_network(spec, derive_seed(p.seed, 6));
  SgdState opt = make_sgd(p.sgd, param_refs(net));
  Rng shuffle(p.seed, 21);
  for (std::size_t epoch = 0; epoch < p.epochs; ++epoch) {
    opt.lr = lr_at(p.sgd, epoch);
    double total = 0.0;
    for (const auto& rows : make_batches(data.train.size(), p.batch_size, shuffle)) {
      const Tensor x = select_rows(data.train.x, rows);
      const std::vector<std::size_t> y = select<std::size_t>(data.train.y, rows);
      Tape tape;
      const Network bound = bind_params(tape, net);
      const Tensor loss = cross_entropy(forward_features(bound, x).logits, y);
      if (!std::isfinite(loss.item())) {
        throw NumericError("pretrain: non-finite loss at epoch " + std::to_string(epoch) +
                           "; lower pretrain.sgd.lr");
      }
      total += loss.item() * static_cast<double>(rows.size());
      const GradMap grads = tape.backward(loss);
      sgd_step(param_refs(net), grads.gather(param_list(bound)), opt);
    }
    out.epoch_loss.push_back(total / static_cast<double>(data.train.size()));
  }
  out.teacher = detach_params(net);
  out.train_accuracy = evaluate_accuracy(out.teacher, data.train);
  out.test_accuracy = data.test.size() ? evaluate_accuracy(out.teacher, data.test) : 0.0;
  return out;
}

/// Trains the configured teacher and writes its checkpoint to `path`.
inline PretrainResult pretrain_teacher(const ExperimentConfig& cfg, const fs::path& path) {
  const Dataset data = load_dataset(cfg);
  PretrainResult r = train_classifier(cfg.teacher_spec(), data, cfg.pretrain);
  CheckpointMeta meta;
  meta.seed = cfg.pretrain.seed;
  meta.epoch = cfg.pretrain.epochs;
  meta.config_digest = config_digest(cfg);
  meta.role = "teacher";
  meta.train_accuracy = r.train_accuracy;
  meta.test_accuracy = r.test_accuracy;
  save_checkpoint(r.teacher, meta, path);
  return r;
}

/// Teacher for a run: a fresh network in scratch mode, otherwise the
/// configured checkpoint.
inline Network load_teacher(const ExperimentConfig& cfg) {
  if (cfg.teacher_mode == TeacherMode::scratch) {
    return build_network(cfg.teacher_spec(), derive_seed(cfg.seed, 5));
  }
  if (!fs::exists(cfg.teacher_checkpoint)) {
    throw ConfigError("teacher checkpoint '" + cfg.teacher_checkpoint +
                      "' not found; create it with `sakd pretrain-teacher --config <same config>` "
                      "or set teacher_mode to scratch");
  }
  return load_checkpoint(cfg.teacher_checkpoint, cfg.teacher_spec()).net;
}

// ---------------------------------------------------------------------------
// Single run

struct RunSummary {
  std::string strategy;
  std::uint64_t seed = 0;
  std::size_t epochs = 0;
  double final_train_accuracy = 0.0;
  double final_test_accuracy = 0.0;
  double teacher_test_accuracy = 0.0;
  double wall_time_s = 0.0;
  std::vector<EpochStats> history;
};

inline json summary_json(const RunSummary& s) {
  return {{"strategy", s.strategy},
          {"seed", s.seed},
          {"epochs", s.epochs},
          {"final_train_accuracy", s.final_train_accuracy},
          {"final_test_accuracy", s.final_test_accuracy},
          {"teacher_test_accuracy", s.teacher_test_accuracy},
          {"wall_time_s", s.wall_time_s}};
}

inline const std::vector<std::string>& run_manifest() {
  static const std::vector<std::string> files = {"metrics.csv", "student.ckpt.json", "config.json",
                                                 "summary.json"};
  return files;
}

/// Trains one student under `cfg` and writes the run directory `out`.
/// `teacher` and `data` may be supplied to share them across runs.
inline RunSummary run_experiment(const ExperimentConfig& cfg, const fs::path& out,
                                 const Network* teacher = nullptr, const Dataset* data = nullptr,
                                 TrainHooks hooks = {}) {
  validate(cfg);
  const auto start = std::chrono::steady_clock::now();
  std::optional<Dataset> own_data;
  if (!data) data = &own_data.emplace(load_dataset(cfg));
  std::optional<Network> own_teacher;
  if (!teacher) teacher = &own_teacher.emplace(load_teacher(cfg));
  if (teacher->spec.input_dim != data->input_dim || teacher->spec.classifier_dim != data->classes) {
    throw ConfigError("teacher expects " + std::to_string(teacher->spec.input_dim) + " inputs and " +
                      std::to_string(teacher->spec.classifier_dim) + " classes; dataset has " +
                      std::to_string(data->input_dim) + " and " + std::to_string(data->classes));
  }

  const TrainConfig tc = train_config(cfg);
  TrainState st = make_train_state(*teacher, cfg.student_spec(), tc);

  fs::create_directories(out);
  ExperimentConfig snapshot = cfg;
  snapshot.output_dir = out.string();
  write_text(out / "config.json", to_json(snapshot).dump(2) + "\n");

  std::ofstream metrics(out / "metrics.csv", std::ios::binary);
  if (!metrics) throw ConfigError("cannot write '" + (out / "metrics.csv").string() + "'");
  MetricsWriter writer(metrics, cfg.spots(), data->test.size() > 0);
  auto user_epoch = hooks.on_epoch;
  hooks.on_epoch = [&](const EpochStats& es) {
    writer.write(es);
    if (user_epoch) user_epoch(es);
  };

  RunSummary summary;
  summary.strategy = std::string(to_string(cfg.strategy));
  summary.seed = cfg.seed;
  summary.epochs = cfg.epochs;
  summary.history = train(st, *data, tc, hooks);
  summary.final_train_accuracy = evaluate_accuracy(st.rn.student, data->train);
  summary.final_test_accuracy =
      data->test.size() ? evaluate_accuracy(st.rn.student, data->test) : 0.0;
  summary.teacher_test_accuracy =
      data->test.size() ? evaluate_accuracy(st.rn.teacher, data->test) : 0.0;

  CheckpointMeta meta;
  meta.seed = cfg.seed;
  meta.epoch = cfg.epochs;
  meta.config_digest = config_digest(snapshot);
  meta.role = "student";
  meta.train_accuracy = summary.final_train_accuracy;
  meta.test_accuracy = summary.final_test_accuracy;
  save_checkpoint(detach_params(st.rn.student), meta, out / "student.ckpt.json");

  summary.wall_time_s =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  write_text(out / "summary.json", summary_json(summary).dump(2) + "\n");
  return summary;
}

// ---------------------------------------------------------------------------
// Ablation grid

struct AblationCell {
  Strategy strategy = Strategy::adaptive;
  std::uint64_t seed = 0;
  bool ok = false;
  std::string error;
  RunSummary summary;
};

struct AblationRow {
  Strategy strategy = Strategy::adaptive;
  std::size_t runs = 0;
  std::size_t failed = 0;
  double mean_test_accuracy = NAN;
  double std_test_accuracy = NAN;
};

struct AblationResult {
  std::vector<AblationCell> cells;
  std::vector<AblationRow> rows;

  const AblationRow* row(Strategy s) const {
    for (const auto& r : rows) {
      if (r.strategy == s) return &r;
    }
    return nullptr;
  }
};

/// Mean and sample standard deviation (0 for a single value).
inline std::pair<double, double> mean_std(const std::vector<double>& xs) {
  if (xs.empty()) return {NAN, NAN};
  double mean = 0.0;
  for (double x : xs) mean += x;
  mean /= static_cast<double>(xs.size());
  double var = 0.0;
  for (double x : xs) var += (x - mean) * (x - mean);
  const double sd = xs.size() > 1 ? std::sqrt(var / static_cast<double>(xs.size() - 1)) : 0.0;
  return {mean, sd};
}

/// Strategies in table order (adaptive, always, anti, rand, none), duplicates
/// removed.
inline std::vector<Strategy> table_order(const std::vector<Strategy>& requested) {
  std::vector<Strategy> out;
  for (Strategy s : kAllStrategies) {
    if (std::find(requested.begin(), requested.end(), s) != requested.end()) out.push_back(s);
  }
  return out;
}

inline std::string render_ablation_csv(const AblationResult& r) {
  std::ostringstream os;
  os << "strategy,runs,failed,mean_test_accuracy,std_test_accuracy\n";
  for (const auto& row : r.rows) {
    os << to_string(row.strategy) << ',' << row.runs << ',' << row.failed << ','
       << (std::isnan(row.mean_test_accuracy) ? "" : metric(row.mean_test_accuracy)) << ','
       << (std::isnan(row.std_test_accuracy) ? "" : metric(row.std_test_accuracy)) << '\n';
  }
  return os.str();
}

inline std::string render_runs_csv(const AblationResult& r) {
  std::ostringstream os;
  os << "strategy,seed,status,final_train_accuracy,final_test_accuracy,error\n";
  for (const auto& c : r.cells) {
    std::string err = c.error;
    for (char& ch : err) {
      if (ch == ',' || ch == '\n') ch = ';';
    }
    os << to_string(c.strategy) << ',' << c.seed << ',' << (c.ok ? "ok" : "failed") << ','
       << (c.ok ? metric(c.summary.final_train_accuracy) : "") << ','
       << (c.ok ? metric(c.summary.final_test_accuracy) : "") << ',' << err << '\n';
  }
  return os.str();
}

inline std::string render_ablation_text(const AblationResult& r) {
  std::ostringstream os;
  os << "strategy   runs  failed  test accuracy (%)\n";
  for (const auto& row : r.rows) {
    char line[128];
    if (std::isnan(row.mean_test_accuracy)) {
      std::snprintf(line, sizeof line, "%-9s  %4zu  %6zu  n/a\n",
                    std::string(to_string(row.strategy)).c_str(), row.runs, row.failed);
    } else {
      std::snprintf(line, sizeof line, "%-9s  %4zu  %6zu  %.2f +- %.2f\n",
                    std::string(to_string(row.strategy)).c_str(), row.runs, row.failed,
                    100.0 * row.mean_test_accuracy, 100.0 * row.std_test_accuracy);
    }
    os << line;
  }
  for (const auto& c : r.cells) {
    if (!c.ok) os << "failed: " << to_string(c.strategy) << " seed " << c.seed << ": " << c.error << '\n';
  }
  return os.str();
}

inline std::string cell_dir_name(Strategy s, std::uint64_t seed) {
  return std::string(to_string(s)) + "-seed" + std::to_string(seed);
}

/// Runs every (strategy, seed) pair, `jobs` at a time, into
/// out/<strategy>-seed<seed>/, then writes ablation.csv (per strategy),
/// ablation_runs.csv (per run) and ablation.txt. A failing run is recorded in
/// its cell; the tables are still written.
inline AblationResult ablate(const ExperimentConfig& cfg, const std::vector<Strategy>& strategies,
                             const std::vector<std::uint64_t>& seeds, const fs::path& out,
                             std::size_t jobs = 1) {
  if (strategies.empty()) throw ConfigError("ablate: need at least one strategy");
  if (seeds.empty()) throw ConfigError("ablate: need at least one seed");
  validate(cfg);
  const Dataset data = load_dataset(cfg);
  std::optional<Network> shared_teacher;
  if (cfg.teacher_mode != TeacherMode::scratch) shared_teacher = load_teacher(cfg);

  AblationResult result;
  for (Strategy s : table_order(strategies)) {
    for (std::uint64_t seed : seeds) {
      AblationCell cell;
      cell.strategy = s;
      cell.seed = seed;
      result.cells.push_back(cell);
    }
  }

  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < result.cells.size(); i = next++) {
      AblationCell& cell = result.cells[i];
      ExperimentConfig c = cfg;
      c.strategy = cell.strategy;
      c.seed = cell.seed;
      const fs::path dir = out / cell_dir_name(cell.strategy, cell.seed);
      c.output_dir = dir.string();
      try {
        cell.summary = run_experiment(c, dir, shared_teacher ? &*shared_teacher : nullptr, &data);
        cell.summary.history.clear();
        cell.ok = true;
      } catch (const std::exception& e) {
        cell.error = e.what();
      }
    }
  };
  const std::size_t n_threads = std::max<std::size_t>(1, std::min(jobs, result.cells.size()));
  if (n_threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < n_threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }

  for (Strategy s : table_order(strategies)) {
    AblationRow row;
    row.strategy = s;
    std::vector<double> accs;
    for (const auto& c : result.cells) {
      if (c.strategy != s) continue;
      ++row.runs;
      if (c.ok) accs.push_back(c.summary.final_test_accuracy);
      else ++row.failed;
    }
    std::tie(row.mean_test_accuracy, row.std_test_accuracy) = mean_std(accs);
    result.rows.push_back(row);
  }

  write_text(out / "ablation.csv", render_ablation_csv(result));
  write_text(out / "ablation_runs.csv", render_runs_csv(result));
  write_text(out / "ablation.txt", render_ablation_text(result));
  return result;
}

// ---------------------------------------------------------------------------
// Evaluation

struct EvalResult {
  double train_accuracy = 0.0;
  double test_accuracy = 0.0;
  CheckpointMeta meta;
};

/// Accuracy of a checkpointed network on the configured dataset.
inline EvalResult evaluate_checkpoint(const ExperimentConfig& cfg, const fs::path& path) {
  const Dataset data = load_dataset(cfg);
  const Checkpoint ck = load_checkpoint(path);
  if (ck.net.spec.input_dim != data.input_dim || ck.net.spec.classifier_dim != data.classes) {
    throw IntegrityError(path.string() + ": network expects " + std::to_string(ck.net.spec.input_dim) +
                         " inputs and " + std::to_string(ck.net.spec.classifier_dim) +
                         " classes; dataset has " + std::to_string(data.input_dim) + " and " +
                         std::to_string(data.classes));
  }
  EvalResult r;
  r.meta = ck.meta;
  r.train_accuracy = evaluate_accuracy(ck.net, data.train);
  r.test_accuracy = data.test.size() ? evaluate_accuracy(ck.net, data.test) : 0.0;
  return r;
}

}  // namespace sakd::harness
