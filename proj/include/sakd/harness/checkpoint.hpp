// SPDX-License-Identifier: Apache-2.0
//
// Network checkpoints as JSON text. Parameter values are stored as C99
// hexadecimal float strings ("%a"), which read back bit for bit.
//
//   {"format_version": 1,
//    "spec": {...},
//    "params": [{"name": "block1.layer1.weight", "shape": [32, 16], "data": ["0x1.8p-3", ...]}, ...],
//    "metadata": {"seed": 1, "epoch": 60, "config_digest": "...", ...}}

#pragma once

#include <cerrno>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "sakd/errors.hpp"
#include "sakd/harness/config.hpp"
#include "sakd/network.hpp"

namespace sakd::harness {

inline constexpr int kCheckpointVersion = 1;

inline std::string hexfloat(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%a", v);
  return buf;
}

inline double parse_hexfloat(const std::string& s) {
  errno = 0;
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (end == s.c_str() || *end != '\0') throw IntegrityError("checkpoint: bad float literal '" + s + "'");
  return v;
}

struct CheckpointMeta {
  std::uint64_t seed = 0;
  std::size_t epoch = 0;
  std::string config_digest;
  std::string role;                         // "teacher" or "student"
  std::optional<double> train_accuracy;     // stored exactly
  std::optional<double> test_accuracy;
};

struct Checkpoint {
  Network net;
  CheckpointMeta meta;
};

inline std::string checkpoint_text(const Network& net, const CheckpointMeta& meta) {
  json params = json::array();
  visit_params(net, [&](const std::string& name, const Tensor& t) {
    json data = json::array();
    for (double v : t.values()) data.push_back(hexfloat(v));
    params.push_back({{"name", name}, {"shape", t.shape()}, {"data", std::move(data)}});
  });
  json m = {{"seed", meta.seed},
            {"epoch", meta.epoch},
            {"config_digest", meta.config_digest},
            {"role", meta.role}};
  if (meta.train_accuracy) m["train_accuracy"] = hexfloat(*meta.train_accuracy);
  if (meta.test_accuracy) m["test_accuracy"] = hexfloat(*meta.test_accuracy);
  json doc = {{"format_version", kCheckpointVersion},
              {"spec", network_spec_to_json(net.spec)},
              {"params", std::move(params)},
              {"metadata", std::move(m)}};
  return doc.dump(1) + "\n";
}

inline void save_checkpoint(const Network& net, const CheckpointMeta& meta,
                            const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write checkpoint '" + path.string() + "'");
  out << checkpoint_text(net, meta);
  if (!out) throw ConfigError("failed writing checkpoint '" + path.string() + "'");
}

inline Checkpoint parse_checkpoint(const json& doc, const std::string& origin,
                                   const std::optional<NetworkSpec>& expected = std::nullopt) {
  if (!doc.is_object() || !doc.contains("format_version")) {
    throw IntegrityError(origin + ": not a checkpoint (no format_version)");
  }
  const int version = doc.at("format_version").get<int>();
  if (version != kCheckpointVersion) {
    throw IntegrityError(origin + ": checkpoint format_version " + std::to_string(version) +
                         " is incompatible with this build (expects " +
                         std::to_string(kCheckpointVersion) + ")");
  }
  Checkpoint ck;
  try {
    ck.net.spec = network_spec_from_json(doc.at("spec"));
  } catch (const ConfigError& e) {
    throw IntegrityError(origin + ": bad spec: " + e.what());
  }
  if (expected && !(network_spec_to_json(*expected) == network_spec_to_json(ck.net.spec))) {
    throw IntegrityError(origin + ": checkpoint spec " + network_spec_to_json(ck.net.spec).dump() +
                         " does not match expected " + network_spec_to_json(*expected).dump());
  }
  ck.net = build_network(ck.net.spec, 0);

  const json& params = doc.at("params");
  std::size_t k = 0;
  visit_params(ck.net, [&](const std::string& name, Tensor& t) {
    if (k >= params.size()) throw IntegrityError(origin + ": missing parameter '" + name + "'");
    const json& p = params[k++];
    if (p.at("name").get<std::string>() != name) {
      throw IntegrityError(origin + ": expected parameter '" + name + "', found '" +
                           p.at("name").get<std::string>() + "'");
    }
    if (p.at("shape").get<Shape>() != t.shape()) {
      throw IntegrityError(origin + ": parameter '" + name + "' has shape " +
                           to_string(p.at("shape").get<Shape>()) + ", spec needs " +
                           to_string(t.shape()));
    }
    const json& data = p.at("data");
    if (!data.is_array() || data.size() != t.size()) {
      throw IntegrityError(origin + ": parameter '" + name + "' holds " +
                           std::to_string(data.is_array() ? data.size() : 0) + " values, expected " +
                           std::to_string(t.size()));
    }
    std::vector<double> values;
    values.reserve(data.size());
    for (const json& v : data) values.push_back(parse_hexfloat(v.get<std::string>()));
    t = Tensor(t.shape(), std::move(values));
  });
  if (k != params.size()) {
    throw IntegrityError(origin + ": " + std::to_string(params.size() - k) + " unexpected extra parameters");
  }

  const json& m = doc.at("metadata");
  ck.meta.seed = m.at("seed").get<std::uint64_t>();
  ck.meta.epoch = m.at("epoch").get<std::size_t>();
  ck.meta.config_digest = m.at("config_digest").get<std::string>();
  ck.meta.role = m.value("role", "");
  if (m.contains("train_accuracy")) ck.meta.train_accuracy = parse_hexfloat(m["train_accuracy"]);
  if (m.contains("test_accuracy")) ck.meta.test_accuracy = parse_hexfloat(m["test_accuracy"]);
  return ck;
}

/// Loads and validates a checkpoint; with `expected`, a differing spec is an
/// IntegrityError.
inline Checkpoint load_checkpoint(const std::filesystem::path& path,
                                  const std::optional<NetworkSpec>& expected = std::nullopt) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open checkpoint '" + path.string() + "'");
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    throw IntegrityError(path.string() + ": checkpoint is not valid JSON: " + e.what());
  }
  try {
    return parse_checkpoint(doc, path.string(), expected);
  } catch (const json::exception& e) {
    throw IntegrityError(path.string() + ": malformed checkpoint: " + e.what());
  }
}

}  // namespace sakd::harness
