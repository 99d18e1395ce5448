// SPDX-License-Identifier: Apache-2.0
//
// Experiment configuration: presets, strict JSON loading and the resolved
// snapshot written next to every run.
//
// Loading order is preset -> config file -> command-line overrides. Every
// object in the file is checked against its known key set; an unknown key is
// a ConfigError naming the full path.

#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "sakd/distillers.hpp"
#include "sakd/errors.hpp"
#include "sakd/network.hpp"
#include "sakd/optim.hpp"
#include "sakd/policy.hpp"
#include "sakd/trainer.hpp"

namespace sakd::harness {

using json = nlohmann::json;
using sakd::to_string;

enum class DatasetKind { blobs, spirals, csv };

inline std::string_view to_string(DatasetKind k) {
  switch (k) {
    case DatasetKind::blobs: return "blobs";
    case DatasetKind::spirals: return "spirals";
    case DatasetKind::csv: return "csv";
  }
  return "?";
}

struct DatasetSpec {
  DatasetKind kind = DatasetKind::blobs;
  std::size_t classes = 10;
  std::size_t input_dim = 32;
  std::size_t samples_per_class = 500;
  double noise = 1.0;
  double center_scale = 1.0;
  std::size_t clusters_per_class = 1;  // blobs only
  std::uint64_t seed = 0;
  std::string path;                    // csv only
};

struct PretrainSpec {
  std::size_t epochs = 30;
  std::size_t batch_size = 32;
  SgdConfig sgd;
  std::uint64_t seed = 0;
};

struct ExperimentConfig {
  std::string preset = "desk";
  std::uint64_t seed = 0;
  DatasetSpec dataset;
  std::vector<BlockSpec> teacher_blocks;
  std::vector<BlockSpec> student_blocks;
  DistillConfig distill;
  Strategy strategy = Strategy::adaptive;
  double tau0 = 5.0;
  double tau_min = 0.5;
  std::optional<double> tau_decay;  // unset: reach tau_min at the last epoch
  SgdConfig sgd;
  bool auto_milestones = true;      // milestones at 5/8, 6/8, 7/8 of epochs
  std::size_t epochs = 60;
  std::size_t batch_size = 32;
  TeacherMode teacher_mode = TeacherMode::frozen;
  std::string teacher_checkpoint;
  PretrainSpec pretrain;
  std::string output_dir = "runs/train";

  NetworkSpec teacher_spec() const {
    return NetworkSpec{dataset.input_dim, teacher_blocks, dataset.classes};
  }
  NetworkSpec student_spec() const {
    return NetworkSpec{dataset.input_dim, student_blocks, dataset.classes};
  }
  std::size_t spots() const { return teacher_blocks.size() + 1; }
};

/// Milestones at the same fractions of training as 150/180/210 of 240.
inline std::vector<std::size_t> proportional_milestones(std::size_t epochs) {
  std::vector<std::size_t> out;
  for (double frac : {150.0 / 240.0, 180.0 / 240.0, 210.0 / 240.0}) {
    const auto m = static_cast<std::size_t>(std::lround(frac * static_cast<double>(epochs)));
    if (m > 0 && (out.empty() || m > out.back())) out.push_back(m);
  }
  return out;
}

/// TrainConfig with schedule defaults resolved.
inline TrainConfig train_config(const ExperimentConfig& c) {
  TrainConfig t;
  t.distill = c.distill;
  t.strategy = c.strategy;
  t.tau = c.tau_decay ? TauSchedule{c.tau0, c.tau_min, *c.tau_decay}
                      : TauSchedule::reaching_floor(c.epochs, c.tau0, c.tau_min);
  t.sgd = c.sgd;
  if (c.auto_milestones) t.sgd.milestones = proportional_milestones(c.epochs);
  t.epochs = c.epochs;
  t.batch_size = c.batch_size;
  t.teacher_mode = c.teacher_mode;
  t.seed = c.seed;
  return t;
}

// ---------------------------------------------------------------------------
// Presets

inline std::vector<BlockSpec> uniform_blocks(std::size_t blocks, std::size_t width) {
  return std::vector<BlockSpec>(blocks, BlockSpec{{LayerSpec{width, Activation::relu}}});
}

/// Desk-scale benchmark: 10-class blobs in 32-D, teacher 4x128, student 4x16,
/// FitNets + KD, 60 epochs of batch 32. The student learning rate is 0.01:
/// at 0.05 the T^2-scaled KL gradient kills the ReLUs of the 16-wide student
/// within a few epochs.
inline ExperimentConfig desk_preset() {
  ExperimentConfig c;
  c.preset = "desk";
  c.seed = 1;
  c.dataset = DatasetSpec{DatasetKind::blobs, 10, 32, 500, 1.0, 1.0, 4, 2024, ""};
  c.teacher_blocks = uniform_blocks(4, 128);
  c.student_blocks = uniform_blocks(4, 16);
  c.distill = DistillConfig::defaults(DistillerKind::fitnets, 4);
  c.epochs = 60;
  c.batch_size = 32;
  c.sgd.lr = 0.01;
  c.auto_milestones = true;
  c.teacher_checkpoint = "runs/teacher/teacher.ckpt.json";
  c.pretrain = PretrainSpec{40, 32, SgdConfig{0.05, 0.9, 5e-4, {}, 0.1}, 7};
  c.pretrain.sgd.milestones = proportional_milestones(c.pretrain.epochs);
  c.output_dir = "runs/train";
  return c;
}

/// Published training schedule (batch 64, 240 epochs, lr 0.05 decayed by 0.1
/// at epochs 150/180/210, T = 4, tau0 = 5, beta1 = beta3 = 1) on the desk data
/// and networks.
inline ExperimentConfig paper_preset() {
  ExperimentConfig c = desk_preset();
  c.preset = "paper";
  c.epochs = 240;
  c.batch_size = 64;
  c.sgd.lr = 0.05;
  c.auto_milestones = false;
  c.sgd.milestones = {150, 180, 210};
  c.output_dir = "runs/paper";
  return c;
}

inline ExperimentConfig preset(const std::string& name) {
  if (name == "desk") return desk_preset();
  if (name == "paper") return paper_preset();
  throw ConfigError("unknown preset '" + name + "' (expected desk or paper)");
}

// ---------------------------------------------------------------------------
// JSON mapping

namespace detail {

inline void check_keys(const json& obj, const std::string& path,
                       std::initializer_list<const char*> allowed) {
  if (!obj.is_object()) throw ConfigError(path + ": expected an object");
  const std::set<std::string> known(allowed.begin(), allowed.end());
  for (const auto& [key, _] : obj.items()) {
    if (!known.count(key)) throw ConfigError("unknown config key '" + path + "." + key + "'");
  }
}

template <class T>
T get(const json& obj, const std::string& path, const char* key) {
  try {
    return obj.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError("config key '" + path + "." + key + "': " + e.what());
  }
}

inline double get_nonneg(const json& obj, const std::string& path, const char* key) {
  const double v = get<double>(obj, path, key);
  if (!(v >= 0.0) || !std::isfinite(v)) {
    throw ConfigError("config key '" + path + "." + key + "' must be a finite value >= 0");
  }
  return v;
}

inline std::size_t get_positive(const json& obj, const std::string& path, const char* key) {
  const auto v = get<long long>(obj, path, key);
  if (v <= 0) throw ConfigError("config key '" + path + "." + key + "' must be positive");
  return static_cast<std::size_t>(v);
}

inline std::size_t get_count(const json& obj, const std::string& path, const char* key) {
  const auto v = get<long long>(obj, path, key);
  if (v < 0) throw ConfigError("config key '" + path + "." + key + "' must be >= 0");
  return static_cast<std::size_t>(v);
}

}  // namespace detail

inline json blocks_to_json(const std::vector<BlockSpec>& blocks) {
  json out = json::array();
  for (const BlockSpec& b : blocks) {
    json layers = json::array();
    for (const LayerSpec& l : b.layers) {
      layers.push_back({{"width", l.width},
                        {"activation", l.activation == Activation::relu ? "relu" : "none"}});
    }
    out.push_back({{"layers", layers}});
  }
  return out;
}

inline std::vector<BlockSpec> blocks_from_json(const json& j, const std::string& path) {
  if (!j.is_array()) throw ConfigError(path + ": expected a list of blocks");
  std::vector<BlockSpec> out;
  for (std::size_t b = 0; b < j.size(); ++b) {
    const std::string bp = path + "[" + std::to_string(b) + "]";
    detail::check_keys(j[b], bp, {"layers"});
    BlockSpec block;
    const json& layers = j[b].at("layers");
    if (!layers.is_array() || layers.empty()) throw ConfigError(bp + ".layers: expected a non-empty list");
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const std::string lp = bp + ".layers[" + std::to_string(l) + "]";
      detail::check_keys(layers[l], lp, {"width", "activation"});
      LayerSpec layer;
      layer.width = detail::get_positive(layers[l], lp, "width");
      const std::string act =
          layers[l].contains("activation") ? detail::get<std::string>(layers[l], lp, "activation") : "relu";
      if (act == "relu") layer.activation = Activation::relu;
      else if (act == "none") layer.activation = Activation::none;
      else throw ConfigError(lp + ".activation: expected relu or none, got '" + act + "'");
      block.layers.push_back(layer);
    }
    out.push_back(std::move(block));
  }
  if (out.empty()) throw ConfigError(path + ": at least one block is required");
  return out;
}

inline json network_spec_to_json(const NetworkSpec& spec) {
  return {{"input_dim", spec.input_dim},
          {"classifier_dim", spec.classifier_dim},
          {"blocks", blocks_to_json(spec.blocks)}};
}

inline NetworkSpec network_spec_from_json(const json& j) {
  detail::check_keys(j, "spec", {"input_dim", "classifier_dim", "blocks"});
  NetworkSpec spec;
  spec.input_dim = detail::get_positive(j, "spec", "input_dim");
  spec.classifier_dim = detail::get_positive(j, "spec", "classifier_dim");
  spec.blocks = blocks_from_json(j.at("blocks"), "spec.blocks");
  spec.validate();
  return spec;
}

inline json sgd_to_json(const SgdConfig& s, bool auto_milestones) {
  json m = auto_milestones ? json(nullptr) : json(s.milestones);
  return {{"lr", s.lr},
          {"momentum", s.momentum},
          {"weight_decay", s.weight_decay},
          {"milestones", m},
          {"gamma", s.gamma}};
}

inline SgdConfig sgd_from_json(const json& j, const std::string& path, bool& auto_milestones) {
  detail::check_keys(j, path, {"lr", "momentum", "weight_decay", "milestones", "gamma"});
  SgdConfig s;
  s.lr = detail::get<double>(j, path, "lr");
  s.momentum = detail::get<double>(j, path, "momentum");
  s.weight_decay = detail::get<double>(j, path, "weight_decay");
  s.gamma = detail::get<double>(j, path, "gamma");
  auto_milestones = j.at("milestones").is_null();
  if (!auto_milestones) s.milestones = detail::get<std::vector<std::size_t>>(j, path, "milestones");
  s.validate();
  return s;
}

inline json to_json(const ExperimentConfig& c) {
  json j;
  j["preset"] = c.preset;
  j["seed"] = c.seed;
  j["dataset"] = {{"kind", std::string(to_string(c.dataset.kind))},
                  {"classes", c.dataset.classes},
                  {"input_dim", c.dataset.input_dim},
                  {"samples_per_class", c.dataset.samples_per_class},
                  {"noise", c.dataset.noise},
                  {"center_scale", c.dataset.center_scale},
                  {"clusters_per_class", c.dataset.clusters_per_class},
                  {"seed", c.dataset.seed},
                  {"path", c.dataset.path}};
  j["teacher"] = {{"blocks", blocks_to_json(c.teacher_blocks)}};
  j["student"] = {{"blocks", blocks_to_json(c.student_blocks)}};
  j["distill"] = {{"kind", std::string(to_string(c.distill.kind))},
                  {"spots", c.distill.spots.intermediate},
                  {"logit_spot", c.distill.spots.logit_spot_active},
                  {"beta1", c.distill.beta1},
                  {"beta2", c.distill.beta2},
                  {"beta3", c.distill.beta3},
                  {"temperature", c.distill.temperature},
                  {"at_power", c.distill.at_power},
                  {"kl_t2_scaling", c.distill.kl_t2_scaling}};
  j["strategy"] = std::string(to_string(c.strategy));
  j["tau"] = {{"tau0", c.tau0},
              {"tau_min", c.tau_min},
              {"decay", c.tau_decay ? json(*c.tau_decay) : json(nullptr)}};
  j["sgd"] = sgd_to_json(c.sgd, c.auto_milestones);
  j["epochs"] = c.epochs;
  j["batch_size"] = c.batch_size;
  j["teacher_mode"] = std::string(to_string(c.teacher_mode));
  j["teacher_checkpoint"] = c.teacher_checkpoint;
  j["pretrain"] = {{"epochs", c.pretrain.epochs},
                   {"batch_size", c.pretrain.batch_size},
                   {"seed", c.pretrain.seed},
                   {"sgd", sgd_to_json(c.pretrain.sgd, false)}};
  j["output_dir"] = c.output_dir;
  return j;
}

/// Strict conversion; every key must be present (use apply_overrides to
/// start from a preset).
inline ExperimentConfig from_json(const json& j) {
  using detail::check_keys;
  using detail::get;
  check_keys(j, "config",
             {"preset", "seed", "dataset", "teacher", "student", "distill", "strategy", "tau", "sgd",
              "epochs", "batch_size", "teacher_mode", "teacher_checkpoint", "pretrain",
              "output_dir"});
  ExperimentConfig c;
  c.preset = get<std::string>(j, "config", "preset");
  c.seed = get<std::uint64_t>(j, "config", "seed");

  const json& ds = j.at("dataset");
  check_keys(ds, "dataset",
             {"kind", "classes", "input_dim", "samples_per_class", "noise", "center_scale",
              "clusters_per_class", "seed", "path"});
  const std::string kind = get<std::string>(ds, "dataset", "kind");
  if (kind == "blobs") c.dataset.kind = DatasetKind::blobs;
  else if (kind == "spirals") c.dataset.kind = DatasetKind::spirals;
  else if (kind == "csv") c.dataset.kind = DatasetKind::csv;
  else throw ConfigError("dataset.kind: expected blobs, spirals or csv, got '" + kind + "'");
  c.dataset.classes = detail::get_positive(ds, "dataset", "classes");
  c.dataset.input_dim = detail::get_positive(ds, "dataset", "input_dim");
  c.dataset.samples_per_class = detail::get_positive(ds, "dataset", "samples_per_class");
  c.dataset.noise = detail::get_nonneg(ds, "dataset", "noise");
  c.dataset.center_scale = detail::get_nonneg(ds, "dataset", "center_scale");
  c.dataset.clusters_per_class = detail::get_positive(ds, "dataset", "clusters_per_class");
  c.dataset.seed = get<std::uint64_t>(ds, "dataset", "seed");
  c.dataset.path = get<std::string>(ds, "dataset", "path");

  check_keys(j.at("teacher"), "teacher", {"blocks"});
  check_keys(j.at("student"), "student", {"blocks"});
  c.teacher_blocks = blocks_from_json(j.at("teacher").at("blocks"), "teacher.blocks");
  c.student_blocks = blocks_from_json(j.at("student").at("blocks"), "student.blocks");

  const json& d = j.at("distill");
  check_keys(d, "distill",
             {"kind", "spots", "logit_spot", "beta1", "beta2", "beta3", "temperature", "at_power",
              "kl_t2_scaling"});
  c.distill.kind = parse_distiller(get<std::string>(d, "distill", "kind"));
  c.distill.spots.intermediate = get<std::vector<std::size_t>>(d, "distill", "spots");
  c.distill.spots.logit_spot_active = get<bool>(d, "distill", "logit_spot");
  c.distill.beta1 = detail::get_nonneg(d, "distill", "beta1");
  c.distill.beta2 = detail::get_nonneg(d, "distill", "beta2");
  c.distill.beta3 = detail::get_nonneg(d, "distill", "beta3");
  c.distill.temperature = get<double>(d, "distill", "temperature");
  c.distill.at_power = get<double>(d, "distill", "at_power");
  c.distill.kl_t2_scaling = get<bool>(d, "distill", "kl_t2_scaling");

  c.strategy = parse_strategy(get<std::string>(j, "config", "strategy"));

  const json& t = j.at("tau");
  check_keys(t, "tau", {"tau0", "tau_min", "decay"});
  c.tau0 = get<double>(t, "tau", "tau0");
  c.tau_min = get<double>(t, "tau", "tau_min");
  if (!t.at("decay").is_null()) c.tau_decay = get<double>(t, "tau", "decay");

  c.sgd = sgd_from_json(j.at("sgd"), "sgd", c.auto_milestones);
  c.epochs = detail::get_count(j, "config", "epochs");
  c.batch_size = detail::get_positive(j, "config", "batch_size");
  c.teacher_mode = parse_teacher_mode(get<std::string>(j, "config", "teacher_mode"));
  c.teacher_checkpoint = get<std::string>(j, "config", "teacher_checkpoint");

  const json& p = j.at("pretrain");
  check_keys(p, "pretrain", {"epochs", "batch_size", "seed", "sgd"});
  c.pretrain.epochs = detail::get_count(p, "pretrain", "epochs");
  c.pretrain.batch_size = detail::get_positive(p, "pretrain", "batch_size");
  c.pretrain.seed = get<std::uint64_t>(p, "pretrain", "seed");
  bool pretrain_auto = false;
  c.pretrain.sgd = sgd_from_json(p.at("sgd"), "pretrain.sgd", pretrain_auto);
  if (pretrain_auto) c.pretrain.sgd.milestones = proportional_milestones(c.pretrain.epochs);

  c.output_dir = get<std::string>(j, "config", "output_dir");
  return c;
}

/// Range checks across fields; lists every violation.
inline void validate(const ExperimentConfig& c) {
  std::vector<std::string> problems;
  if (c.dataset.classes < 2) problems.push_back("dataset.classes must be >= 2");
  if (c.dataset.kind != DatasetKind::csv && c.dataset.samples_per_class < 10) {
    problems.push_back("dataset.samples_per_class must be >= 10");
  }
  if (c.dataset.kind == DatasetKind::csv && c.dataset.path.empty()) {
    problems.push_back("dataset.path is required for csv datasets");
  }
  if (c.dataset.kind == DatasetKind::spirals && c.dataset.input_dim < 2) {
    problems.push_back("dataset.input_dim must be >= 2 for spirals");
  }
  if (c.teacher_blocks.size() != c.student_blocks.size()) {
    problems.push_back("teacher and student must have the same number of blocks");
  }
  if (!(c.tau_min > 0.0) || !(c.tau0 >= c.tau_min)) problems.push_back("tau: need tau0 >= tau_min > 0");
  if (c.tau_decay && !(*c.tau_decay > 0.0 && *c.tau_decay <= 1.0)) {
    problems.push_back("tau.decay must be in (0, 1]");
  }
  if (!(c.distill.temperature > 0.0)) problems.push_back("distill.temperature must be > 0");
  if (!(c.distill.at_power >= 1.0)) problems.push_back("distill.at_power must be >= 1");
  for (std::size_t s : c.distill.spots.intermediate) {
    if (s == 0 || s > c.teacher_blocks.size()) {
      problems.push_back("distill.spots: spot " + std::to_string(s) + " outside 1.." +
                         std::to_string(c.teacher_blocks.size()));
    }
  }
  if (c.teacher_mode != TeacherMode::scratch && c.teacher_checkpoint.empty()) {
    problems.push_back("teacher_checkpoint is required unless teacher_mode is scratch");
  }
  if (c.output_dir.empty()) problems.push_back("output_dir must not be empty");
  if (!problems.empty()) {
    std::string msg = "invalid configuration:";
    for (const auto& p : problems) msg += "\n  - " + p;
    throw ConfigError(msg);
  }
}

/// Recursively overlays `patch` onto `base`; objects merge, everything else
/// replaces. Keys absent from `base` are kept so from_json reports them.
inline void overlay(json& base, const json& patch) {
  if (!patch.is_object() || !base.is_object()) {
    base = patch;
    return;
  }
  for (const auto& [key, value] : patch.items()) {
    if (base.contains(key) && base[key].is_object() && value.is_object()) {
      overlay(base[key], value);
    } else {
      base[key] = value;
    }
  }
}

inline json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open '" + path.string() + "'");
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("'" + path.string() + "' is not valid JSON: " + e.what());
  }
}

/// Preset (from the file's "preset" key or `preset_name`) overlaid by the
/// file contents.
inline ExperimentConfig load_config(const std::optional<std::filesystem::path>& path,
                                    const std::string& preset_name = "desk") {
  json user = path ? read_json_file(*path) : json::object();
  if (!user.is_object()) throw ConfigError("config must be a JSON object");
  std::string name = preset_name;
  if (user.contains("preset")) name = user.at("preset").get<std::string>();
  ExperimentConfig base = preset(name);
  json merged = to_json(base);
  overlay(merged, user);
  // Changing the distiller without naming spots or beta2 picks its defaults.
  if (user.contains("distill") && user["distill"].contains("kind")) {
    const DistillConfig defaults = DistillConfig::defaults(
        parse_distiller(user["distill"]["kind"].get<std::string>()), base.teacher_blocks.size());
    if (!user["distill"].contains("spots")) merged["distill"]["spots"] = defaults.spots.intermediate;
    if (!user["distill"].contains("beta2")) merged["distill"]["beta2"] = defaults.beta2;
  }
  ExperimentConfig c = from_json(merged);
  validate(c);
  return c;
}

/// FNV-1a of the canonical JSON dump.
inline std::string config_digest(const ExperimentConfig& c) {
  const std::string text = to_json(c).dump();
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  std::ostringstream os;
  os << std::hex << h;
  return os.str();
}

}  // namespace sakd::harness
