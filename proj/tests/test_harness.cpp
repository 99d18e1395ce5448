// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <unistd.h>

#include "sakd/harness/checkpoint.hpp"
#include "sakd/harness/config.hpp"
#include "sakd/harness/dataset.hpp"
#include "sakd/harness/experiment.hpp"
#include "sakd/harness/gradcheck.hpp"
#include "sakd/harness/metrics.hpp"

using namespace sakd;
using namespace sakd::harness;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() /
                       ("sakd_test_" + std::to_string(::getpid())) / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

/// Small, fast configuration: 3-class blobs, 2-block 12-wide teacher and
/// 4-wide student.
ExperimentConfig small_config(const fs::path& dir) {
  ExperimentConfig c = desk_preset();
  c.dataset = DatasetSpec{DatasetKind::blobs, 3, 6, 20, 0.5, 2.0, 1, 77, ""};
  c.teacher_blocks = uniform_blocks(2, 12);
  c.student_blocks = uniform_blocks(2, 4);
  c.distill = DistillConfig::defaults(DistillerKind::fitnets, 2);
  c.epochs = 3;
  c.batch_size = 8;
  c.pretrain.epochs = 15;
  c.pretrain.batch_size = 8;
  c.pretrain.sgd.milestones = {};
  c.teacher_checkpoint = (dir / "teacher.ckpt.json").string();
  c.output_dir = (dir / "run").string();
  return c;
}

json small_config_json(const fs::path& dir) { return to_json(small_config(dir)); }

fs::path write_config(const fs::path& dir, const json& j, const std::string& name = "cfg.json") {
  const fs::path p = dir / name;
  std::ofstream(p) << j.dump(2);
  return p;
}

int run_cli(const std::string& args, std::string* output = nullptr) {
  const fs::path log = fs::temp_directory_path() /
                       ("sakd_cli_" + std::to_string(::getpid()) + ".log");
  const std::string cmd = std::string(SAKD_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  if (output) *output = slurp(log);
  fs::remove(log);
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

// --- config ---------------------------------------------------------------

TEST(Config, PresetsRoundTripThroughJson) {
  for (const char* name : {"desk", "paper"}) {
    const ExperimentConfig c = preset(name);
    EXPECT_EQ(to_json(from_json(to_json(c))), to_json(c)) << name;
  }
}

TEST(Config, DeskPresetMatchesBenchmark) {
  const ExperimentConfig c = desk_preset();
  EXPECT_EQ(c.dataset.classes, 10u);
  EXPECT_EQ(c.dataset.input_dim, 32u);
  EXPECT_EQ(c.dataset.samples_per_class, 500u);
  EXPECT_EQ(c.teacher_spec().block_count(), 4u);
  EXPECT_EQ(c.teacher_spec().block_width(3), 128u);
  EXPECT_EQ(c.student_spec().block_width(3), 16u);
  EXPECT_EQ(c.spots(), 5u);
  EXPECT_EQ(c.epochs, 60u);
  EXPECT_EQ(c.batch_size, 32u);
  EXPECT_EQ(c.distill.kind, DistillerKind::fitnets);
  EXPECT_TRUE(c.distill.spots.logit_spot_active);
}

TEST(Config, PaperPresetSchedule) {
  const TrainConfig t = train_config(paper_preset());
  EXPECT_EQ(t.epochs, 240u);
  EXPECT_EQ(t.batch_size, 64u);
  EXPECT_EQ(t.sgd.lr, 0.05);
  EXPECT_EQ(t.sgd.milestones, (std::vector<std::size_t>{150, 180, 210}));
  EXPECT_EQ(tau_at(t.tau, 0), 5.0);
  EXPECT_EQ(t.distill.temperature, 4.0);
}

TEST(Config, ProportionalMilestones) {
  EXPECT_EQ(proportional_milestones(240), (std::vector<std::size_t>{150, 180, 210}));
  EXPECT_EQ(proportional_milestones(8), (std::vector<std::size_t>{5, 6, 7}));
}

TEST(Config, UnknownKeyIsHardError) {
  const fs::path dir = scratch_dir("unknown_key");
  for (const json& patch : {json{{"epochz", 3}}, json{{"distill", {{"betta2", 1.0}}}},
                            json{{"sgd", {{"nesterov", true}}}}}) {
    const fs::path p = write_config(dir, patch);
    try {
      load_config(p);
      FAIL() << patch.dump();
    } catch (const ConfigError& e) {
      EXPECT_NE(std::string(e.what()).find("unknown config key"), std::string::npos) << e.what();
    }
  }
}

TEST(Config, OverlayKeepsPresetForMissingKeys) {
  const fs::path dir = scratch_dir("overlay");
  const ExperimentConfig c = load_config(write_config(dir, {{"epochs", 7}, {"strategy", "anti"}}));
  EXPECT_EQ(c.epochs, 7u);
  EXPECT_EQ(c.strategy, Strategy::anti);
  EXPECT_EQ(c.batch_size, desk_preset().batch_size);
}

TEST(Config, ChangingDistillerPicksItsDefaults) {
  const fs::path dir = scratch_dir("distiller");
  const ExperimentConfig c = load_config(write_config(dir, {{"distill", {{"kind", "at"}}}}));
  EXPECT_EQ(c.distill.spots.intermediate, (std::vector<std::size_t>{2, 3}));
  EXPECT_EQ(c.distill.beta2, 1000.0);
}

TEST(Config, ValidationListsEveryViolation) {
  ExperimentConfig c = desk_preset();
  c.dataset.classes = 1;
  c.tau_min = 0.0;
  c.student_blocks.pop_back();
  try {
    validate(c);
    FAIL();
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("dataset.classes"), std::string::npos);
    EXPECT_NE(msg.find("tau"), std::string::npos);
    EXPECT_NE(msg.find("same number of blocks"), std::string::npos);
  }
}

TEST(Config, DigestTracksContent) {
  ExperimentConfig a = desk_preset(), b = desk_preset();
  EXPECT_EQ(config_digest(a), config_digest(b));
  b.seed = 2;
  EXPECT_NE(config_digest(a), config_digest(b));
}

// --- dataset --------------------------------------------------------------

TEST(Dataset, StratifiedCounts) {
  for (DatasetKind kind : {DatasetKind::blobs, DatasetKind::spirals}) {
    const DatasetSpec spec{kind, 4, 5, 25, 0.1, 1.0, 2, 3, ""};
    const Dataset ds = gen_dataset(spec);
    std::vector<std::size_t> train(4, 0), test(4, 0);
    for (std::size_t y : ds.train.y) ++train[y];
    for (std::size_t y : ds.test.y) ++test[y];
    for (std::size_t c = 0; c < 4; ++c) {
      EXPECT_EQ(train[c], 20u);
      EXPECT_EQ(test[c], 5u);
    }
    EXPECT_EQ(ds.train.x.shape(), (Shape{80, 5}));
  }
}

TEST(Dataset, SameSeedByteIdenticalFile) {
  const fs::path dir = scratch_dir("dataset_bytes");
  const DatasetSpec spec{DatasetKind::spirals, 3, 4, 15, 0.05, 1.0, 1, 9, ""};
  write_csv(gen_dataset(spec), dir / "a.csv");
  write_csv(gen_dataset(spec), dir / "b.csv");
  EXPECT_EQ(slurp(dir / "a.csv"), slurp(dir / "b.csv"));
  write_csv(gen_dataset(spec, 10), dir / "c.csv");
  EXPECT_NE(slurp(dir / "a.csv"), slurp(dir / "c.csv"));
}

TEST(Dataset, CsvRoundTripIsExact) {
  const fs::path dir = scratch_dir("dataset_csv");
  const Dataset ds = gen_dataset(DatasetSpec{DatasetKind::blobs, 3, 4, 10, 1.0, 1.0, 1, 5, ""});
  write_csv(ds, dir / "d.csv");
  const Dataset back = read_csv(dir / "d.csv");
  EXPECT_TRUE(back.train.x.same_values(ds.train.x));
  EXPECT_TRUE(back.test.x.same_values(ds.test.x));
  EXPECT_EQ(back.train.y, ds.train.y);
  EXPECT_EQ(back.test.y, ds.test.y);
  EXPECT_EQ(back.classes, 3u);
}

TEST(Dataset, InvalidSpecListsViolations) {
  try {
    gen_dataset(DatasetSpec{DatasetKind::blobs, 1, 4, 5, -1.0, 1.0, 1, 5, ""});
    FAIL();
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("classes"), std::string::npos);
    EXPECT_NE(msg.find("samples_per_class"), std::string::npos);
    EXPECT_NE(msg.find("noise"), std::string::npos);
  }
}

TEST(Dataset, NoiselessBlobsAreLearnedExactly) {
  const Dataset ds = gen_dataset(DatasetSpec{DatasetKind::blobs, 4, 8, 20, 0.0, 1.0, 1, 11, ""});
  PretrainSpec p{30, 8, SgdConfig{0.05, 0.9, 0.0, {}, 0.1}, 1};
  const PretrainResult r = train_classifier(uniform_spec(8, 2, 32, 4), ds, p);
  EXPECT_EQ(r.train_accuracy, 1.0);
}

// --- checkpoint -----------------------------------------------------------

TEST(Checkpoint, RoundTripIsBitwise) {
  const fs::path dir = scratch_dir("ckpt");
  const Network net = build_network(uniform_spec(5, 3, 7, 4, 2), 3);
  CheckpointMeta meta{9, 12, "abc", "student", 1.0 / 3.0, std::nullopt};
  save_checkpoint(net, meta, dir / "n.json");
  const Checkpoint back = load_checkpoint(dir / "n.json", net.spec);
  EXPECT_EQ(param_hash(back.net), param_hash(net));
  EXPECT_EQ(back.net.spec, net.spec);
  EXPECT_EQ(back.meta.seed, 9u);
  EXPECT_EQ(back.meta.epoch, 12u);
  EXPECT_EQ(*back.meta.train_accuracy, 1.0 / 3.0);
  EXPECT_FALSE(back.meta.test_accuracy.has_value());
  // Saving the loaded network reproduces the file byte for byte.
  save_checkpoint(back.net, back.meta, dir / "m.json");
  EXPECT_EQ(slurp(dir / "n.json"), slurp(dir / "m.json"));
}

TEST(Checkpoint, ExtremeValuesSurvive) {
  Network net = build_network(uniform_spec(2, 1, 3, 2), 1);
  net.classifier.bias = Tensor::vector({std::numeric_limits<double>::denorm_min(), -0.0});
  const json doc = json::parse(checkpoint_text(net, {}));
  const Checkpoint back = parse_checkpoint(doc, "mem");
  EXPECT_EQ(back.net.classifier.bias[0], std::numeric_limits<double>::denorm_min());
  EXPECT_TRUE(std::signbit(back.net.classifier.bias[1]));
}

TEST(Checkpoint, FormatVersionIsOne) {
  const json doc = json::parse(checkpoint_text(build_network(uniform_spec(2, 1, 3, 2), 1), {}));
  EXPECT_EQ(doc.at("format_version").get<int>(), 1);
}

TEST(Checkpoint, WrongSpecIsIntegrityError) {
  const fs::path dir = scratch_dir("ckpt_spec");
  save_checkpoint(build_network(uniform_spec(5, 2, 7, 4), 3), {}, dir / "n.json");
  EXPECT_THROW(load_checkpoint(dir / "n.json", uniform_spec(5, 2, 8, 4)), IntegrityError);
}

TEST(Checkpoint, VersionMismatchAndCorruptionAreRejected) {
  json doc = json::parse(checkpoint_text(build_network(uniform_spec(2, 1, 3, 2), 1), {}));
  json newer = doc;
  newer["format_version"] = 2;
  try {
    parse_checkpoint(newer, "mem");
    FAIL();
  } catch (const IntegrityError& e) {
    EXPECT_NE(std::string(e.what()).find("incompatible"), std::string::npos);
  }
  json short_array = doc;
  short_array["params"][0]["data"].erase(0);
  EXPECT_THROW(parse_checkpoint(short_array, "mem"), IntegrityError);
  json renamed = doc;
  renamed["params"][1]["name"] = "block1.layer1.gain";
  EXPECT_THROW(parse_checkpoint(renamed, "mem"), IntegrityError);
  json extra = doc;
  extra["params"].push_back(extra["params"][0]);
  EXPECT_THROW(parse_checkpoint(extra, "mem"), IntegrityError);
}

// --- metrics --------------------------------------------------------------

TEST(Metrics, HeaderCoversEverySpot) {
  EXPECT_EQ(metrics_header(3),
            "epoch,split,tau,lr,ce,kl,kd,routing,total,accuracy,p_spot_1,p_spot_2,p_spot_3,"
            "gate_spot_1,gate_spot_2,gate_spot_3");
}

TEST(Metrics, RowHasOneFieldPerColumn) {
  SplitStats s;
  s.p_spot = {0.25, 1.0};
  const std::string row = metrics_row(4, "test", 2.5, 0.01, s, 2);
  EXPECT_EQ(std::count(row.begin(), row.end(), ','), 13);
  EXPECT_EQ(row.rfind("4,test,2.5,0.01,", 0), 0u);
}

// --- experiments ----------------------------------------------------------

class Experiment : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new fs::path(scratch_dir("experiment"));
    const ExperimentConfig c = small_config(*dir_);
    pretrain_ = new PretrainResult(pretrain_teacher(c, c.teacher_checkpoint));
  }
  static void TearDownTestSuite() {
    delete pretrain_;
    delete dir_;
  }
  static fs::path* dir_;
  static PretrainResult* pretrain_;
};

fs::path* Experiment::dir_ = nullptr;
PretrainResult* Experiment::pretrain_ = nullptr;

TEST_F(Experiment, PretrainAccuracyMatchesReload) {
  const ExperimentConfig c = small_config(*dir_);
  const Checkpoint ck = load_checkpoint(c.teacher_checkpoint, c.teacher_spec());
  const Dataset data = load_dataset(c);
  EXPECT_NEAR(evaluate_accuracy(ck.net, data.train), pretrain_->train_accuracy, 1e-12);
  EXPECT_NEAR(*ck.meta.train_accuracy, pretrain_->train_accuracy, 1e-12);
  EXPECT_NEAR(*ck.meta.test_accuracy, pretrain_->test_accuracy, 1e-12);
  EXPECT_GE(pretrain_->train_accuracy, 0.9);
}

TEST_F(Experiment, RunWritesExactManifest) {
  ExperimentConfig c = small_config(*dir_);
  c.strategy = Strategy::rand;
  const fs::path out = *dir_ / "manifest";
  run_experiment(c, out);
  std::vector<std::string> files;
  for (const auto& e : fs::directory_iterator(out)) files.push_back(e.path().filename().string());
  std::sort(files.begin(), files.end());
  std::vector<std::string> expected = run_manifest();
  std::sort(expected.begin(), expected.end());
  EXPECT_EQ(files, expected);
  const json snap = json::parse(slurp(out / "config.json"));
  EXPECT_EQ(snap.at("strategy"), "rand");
  const std::string metrics = slurp(out / "metrics.csv");
  EXPECT_EQ(metrics.substr(0, metrics.find('\n')), metrics_header(3));
  EXPECT_EQ(std::count(metrics.begin(), metrics.end(), '\n'), 1 + 2 * 3);
}

TEST_F(Experiment, RerunIsByteIdentical) {
  const ExperimentConfig c = small_config(*dir_);
  run_experiment(c, *dir_ / "a");
  run_experiment(c, *dir_ / "b");
  EXPECT_EQ(slurp(*dir_ / "a" / "metrics.csv"), slurp(*dir_ / "b" / "metrics.csv"));
  // Checkpoint metadata carries the snapshot digest, which includes the output
  // directory; compare parameters exactly instead.
  EXPECT_EQ(param_hash(load_checkpoint(*dir_ / "a" / "student.ckpt.json").net),
            param_hash(load_checkpoint(*dir_ / "b" / "student.ckpt.json").net));
}

TEST_F(Experiment, SnapshotReproducesRun) {
  const ExperimentConfig c = small_config(*dir_);
  run_experiment(c, *dir_ / "orig");
  const ExperimentConfig again = load_config(*dir_ / "orig" / "config.json");
  run_experiment(again, *dir_ / "orig");
  const std::string first = slurp(*dir_ / "orig" / "metrics.csv");
  run_experiment(c, *dir_ / "orig2");
  EXPECT_EQ(first, slurp(*dir_ / "orig2" / "metrics.csv"));
}

TEST_F(Experiment, MissingTeacherNamesPretrainCommand) {
  ExperimentConfig c = small_config(*dir_);
  c.teacher_checkpoint = (*dir_ / "nope.json").string();
  try {
    run_experiment(c, *dir_ / "missing");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("sakd pretrain-teacher"), std::string::npos);
  }
}

TEST_F(Experiment, AblationCountsAndOrder) {
  const ExperimentConfig c = small_config(*dir_);
  const AblationResult r =
      ablate(c, {Strategy::none, Strategy::always}, {1}, *dir_ / "ablate", 2);
  EXPECT_EQ(r.cells.size(), 2u);
  ASSERT_EQ(r.rows.size(), 2u);
  EXPECT_EQ(r.rows[0].strategy, Strategy::always);
  EXPECT_EQ(r.rows[1].strategy, Strategy::none);
  const std::string csv = slurp(*dir_ / "ablate" / "ablation.csv");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 3);
  EXPECT_TRUE(fs::exists(*dir_ / "ablate" / "always-seed1" / "metrics.csv"));
}

TEST_F(Experiment, AblationMeanMatchesPerRunSummaries) {
  const ExperimentConfig c = small_config(*dir_);
  const fs::path out = *dir_ / "ablate_mean";
  const AblationResult r = ablate(c, {Strategy::adaptive}, {1, 2, 3}, out, 3);
  std::vector<double> accs;
  for (std::uint64_t seed : {1, 2, 3}) {
    const json s = json::parse(slurp(out / cell_dir_name(Strategy::adaptive, seed) / "summary.json"));
    accs.push_back(s.at("final_test_accuracy").get<double>());
  }
  double mean = 0.0;
  for (double a : accs) mean += a / 3.0;
  EXPECT_NEAR(r.rows[0].mean_test_accuracy, mean, 1e-12);
  EXPECT_EQ(r.rows[0].runs, 3u);
}

TEST_F(Experiment, AblationRecordsFailedCells) {
  ExperimentConfig c = small_config(*dir_);
  c.sgd.lr = 1e8;
  c.epochs = 3;
  const AblationResult r = ablate(c, {Strategy::always}, {1}, *dir_ / "ablate_fail", 1);
  ASSERT_EQ(r.rows.size(), 1u);
  EXPECT_EQ(r.rows[0].failed, 1u);
  EXPECT_FALSE(r.cells[0].ok);
  EXPECT_TRUE(fs::exists(*dir_ / "ablate_fail" / "ablation.csv"));
}

TEST_F(Experiment, EvalMatchesSummary) {
  const ExperimentConfig c = small_config(*dir_);
  const RunSummary s = run_experiment(c, *dir_ / "eval");
  const EvalResult e = evaluate_checkpoint(c, *dir_ / "eval" / "student.ckpt.json");
  EXPECT_EQ(e.test_accuracy, s.final_test_accuracy);
  EXPECT_EQ(e.train_accuracy, s.final_train_accuracy);
}

// --- gradcheck ------------------------------------------------------------

TEST(Gradcheck, EveryScopePasses) {
  for (const std::string& scope : gradcheck_scopes()) {
    const GradcheckReport r = run_gradcheck(scope);
    EXPECT_TRUE(r.passed()) << scope;
    EXPECT_LE(r.max_rel_error(scope), kGradcheckTolerance) << scope;
  }
  EXPECT_THROW(run_gradcheck("everything"), ConfigError);
}

// --- CLI ------------------------------------------------------------------

TEST(Cli, UnknownConfigKeyExitsOne) {
  const fs::path dir = scratch_dir("cli_unknown");
  const fs::path cfg = write_config(dir, {{"learning_rate", 0.1}});
  std::string out;
  EXPECT_EQ(run_cli("train --config " + cfg.string(), &out), 1);
  EXPECT_NE(out.find("unknown config key"), std::string::npos) << out;
}

TEST(Cli, BadArgumentsExitOne) {
  EXPECT_EQ(run_cli("train --preset huge"), 1);
  EXPECT_EQ(run_cli("frobnicate"), 1);
  EXPECT_EQ(run_cli("train --strategy sometimes --out /tmp/none"), 1);
}

TEST(Cli, GradcheckOpsExitsZero) {
  std::string out;
  EXPECT_EQ(run_cli("gradcheck --scope ops", &out), 0);
  EXPECT_NE(out.find("PASS"), std::string::npos) << out;
}

TEST(Cli, GenDataIsByteStable) {
  const fs::path dir = scratch_dir("cli_gen");
  EXPECT_EQ(run_cli("gen-data --out " + (dir / "a").string()), 0);
  EXPECT_EQ(run_cli("gen-data --out " + (dir / "b").string()), 0);
  EXPECT_EQ(slurp(dir / "a" / "dataset.csv"), slurp(dir / "b" / "dataset.csv"));
  EXPECT_EQ(run_cli("gen-data --seed 5 --out " + (dir / "c").string()), 0);
  EXPECT_NE(slurp(dir / "a" / "dataset.csv"), slurp(dir / "c" / "dataset.csv"));
}

TEST(Cli, PretrainTrainEvalPipeline) {
  const fs::path dir = scratch_dir("cli_pipeline");
  const fs::path cfg = write_config(dir, small_config_json(dir));
  EXPECT_EQ(run_cli("pretrain-teacher --config " + cfg.string()), 0);
  ASSERT_TRUE(fs::exists(dir / "teacher.ckpt.json"));
  std::string out;
  EXPECT_EQ(run_cli("train --config " + cfg.string() + " --strategy always --seed 4 --out " +
                        (dir / "run").string(),
                    &out),
            0)
      << out;
  const json snap = json::parse(slurp(dir / "run" / "config.json"));
  EXPECT_EQ(snap.at("strategy"), "always");
  EXPECT_EQ(snap.at("seed"), 4);
  EXPECT_EQ(run_cli("eval --out " + (dir / "run").string(), &out), 0) << out;
  EXPECT_NE(out.find("test accuracy"), std::string::npos);
}

TEST(Cli, MissingTeacherExitsOne) {
  const fs::path dir = scratch_dir("cli_missing");
  const fs::path cfg = write_config(dir, small_config_json(dir));
  std::string out;
  EXPECT_EQ(run_cli("train --config " + cfg.string(), &out), 1);
  EXPECT_NE(out.find("pretrain-teacher"), std::string::npos) << out;
}

TEST(Cli, DivergenceExitsTwo) {
  const fs::path dir = scratch_dir("cli_numeric");
  json j = small_config_json(dir);
  j["pretrain"]["sgd"]["lr"] = 1e8;
  const fs::path cfg = write_config(dir, j);
  std::string out;
  EXPECT_EQ(run_cli("pretrain-teacher --config " + cfg.string(), &out), 2) << out;
}
