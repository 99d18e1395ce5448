// SPDX-License-Identifier: Apache-2.0
//
// Synthetic datasets and the CSV exchange format.
//
// CSV layout: header `split,label,x1,...,xD`, one sample per line, split is
// `train` or `test`, values printed with 17 significant digits so a written
// file reads back to the same doubles.

#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "sakd/data.hpp"
#include "sakd/errors.hpp"
#include "sakd/harness/config.hpp"
#include "sakd/random.hpp"

namespace sakd::harness {

namespace detail {

inline void check_spec(const DatasetSpec& spec) {
  std::vector<std::string> problems;
  if (spec.classes < 2) problems.push_back("classes must be >= 2");
  if (spec.samples_per_class < 10) problems.push_back("samples_per_class must be >= 10");
  if (spec.input_dim == 0) problems.push_back("input_dim must be >= 1");
  if (spec.kind == DatasetKind::spirals && spec.input_dim < 2) {
    problems.push_back("spirals need input_dim >= 2");
  }
  if (!(spec.noise >= 0.0) || !std::isfinite(spec.noise)) problems.push_back("noise must be >= 0");
  if (spec.clusters_per_class == 0) problems.push_back("clusters_per_class must be >= 1");
  if (!problems.empty()) {
    std::string msg = "invalid dataset spec:";
    for (const auto& p : problems) msg += "\n  - " + p;
    throw ConfigError(msg);
  }
}

/// Splits per-class sample lists 80/20 after a seeded shuffle; train rows come
/// first class by class, then test rows, each group in shuffled order.
inline Dataset stratified_split(const DatasetSpec& spec, const std::vector<std::vector<double>>& rows,
                                const std::vector<std::size_t>& labels, Rng& rng) {
  Dataset ds;
  ds.input_dim = spec.input_dim;
  ds.classes = spec.classes;
  std::vector<std::size_t> train_idx, test_idx;
  for (std::size_t c = 0; c < spec.classes; ++c) {
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] == c) members.push_back(i);
    }
    std::shuffle(members.begin(), members.end(), rng.engine());
    const std::size_t n_train = (members.size() * 4 + 2) / 5;
    train_idx.insert(train_idx.end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(n_train));
    test_idx.insert(test_idx.end(), members.begin() + static_cast<std::ptrdiff_t>(n_train), members.end());
  }
  std::shuffle(train_idx.begin(), train_idx.end(), rng.engine());
  std::shuffle(test_idx.begin(), test_idx.end(), rng.engine());
  auto build = [&](const std::vector<std::size_t>& idx) {
    LabeledSplit split;
    std::vector<double> x;
    x.reserve(idx.size() * spec.input_dim);
    for (std::size_t i : idx) {
      x.insert(x.end(), rows[i].begin(), rows[i].end());
      split.y.push_back(labels[i]);
    }
    split.x = Tensor({idx.size(), spec.input_dim}, std::move(x));
    return split;
  };
  ds.train = build(train_idx);
  ds.test = build(test_idx);
  return ds;
}

}  // namespace detail

/// Gaussian clusters: each class owns `clusters_per_class` centers drawn from
/// N(0, center_scale^2) per coordinate; samples add N(0, noise^2) per
/// coordinate and are spread evenly over the class's centers.
inline Dataset make_blobs(const DatasetSpec& spec, std::uint64_t seed) {
  detail::check_spec(spec);
  Rng rng(seed, 0x626c6f);
  std::vector<std::vector<std::vector<double>>> centers(spec.classes);
  for (auto& cls : centers) {
    for (std::size_t k = 0; k < spec.clusters_per_class; ++k) {
      std::vector<double> c(spec.input_dim);
      for (double& v : c) v = rng.normal(0.0, spec.center_scale);
      cls.push_back(std::move(c));
    }
  }
  std::vector<std::vector<double>> rows;
  std::vector<std::size_t> labels;
  for (std::size_t c = 0; c < spec.classes; ++c) {
    for (std::size_t i = 0; i < spec.samples_per_class; ++i) {
      const auto& center = centers[c][i % spec.clusters_per_class];
      std::vector<double> row(spec.input_dim);
      for (std::size_t j = 0; j < spec.input_dim; ++j) row[j] = center[j] + rng.normal(0.0, spec.noise);
      rows.push_back(std::move(row));
      labels.push_back(c);
    }
  }
  return detail::stratified_split(spec, rows, labels, rng);
}

/// Interleaved 2-D spiral arms (radius 0.1..1, 1.5 turns) plus N(0, noise^2)
/// jitter, lifted to input_dim by a seeded Gaussian linear map.
inline Dataset make_spirals(const DatasetSpec& spec, std::uint64_t seed) {
  detail::check_spec(spec);
  Rng rng(seed, 0x737069);
  std::vector<double> embed(2 * spec.input_dim);
  for (double& v : embed) v = rng.normal(0.0, 1.0 / std::sqrt(2.0));
  std::vector<std::vector<double>> rows;
  std::vector<std::size_t> labels;
  const double k = static_cast<double>(spec.classes);
  for (std::size_t c = 0; c < spec.classes; ++c) {
    for (std::size_t i = 0; i < spec.samples_per_class; ++i) {
      const double t = static_cast<double>(i) / static_cast<double>(spec.samples_per_class - 1);
      const double r = 0.1 + 0.9 * t;
      const double angle = 2.0 * std::numbers::pi * (static_cast<double>(c) / k + 0.75 * t);
      const double px = r * std::cos(angle) + rng.normal(0.0, spec.noise);
      const double py = r * std::sin(angle) + rng.normal(0.0, spec.noise);
      std::vector<double> row(spec.input_dim);
      for (std::size_t j = 0; j < spec.input_dim; ++j) {
        row[j] = px * embed[j] + py * embed[spec.input_dim + j];
      }
      rows.push_back(std::move(row));
      labels.push_back(c);
    }
  }
  return detail::stratified_split(spec, rows, labels, rng);
}

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline void write_csv(const Dataset& ds, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write '" + path.string() + "'");
  out << "split,label";
  for (std::size_t j = 0; j < ds.input_dim; ++j) out << ",x" << j + 1;
  out << '\n';
  auto emit = [&](const LabeledSplit& split, const char* name) {
    for (std::size_t r = 0; r < split.size(); ++r) {
      out << name << ',' << split.y[r];
      for (std::size_t j = 0; j < ds.input_dim; ++j) out << ',' << format_double(split.x.at(r, j));
      out << '\n';
    }
  };
  emit(ds.train, "train");
  emit(ds.test, "test");
}

/// Reads the CSV format above. `classes` is one more than the largest label.
inline Dataset read_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open dataset '" + path.string() + "'");
  std::string line;
  if (!std::getline(in, line)) throw ConfigError("dataset '" + path.string() + "' is empty");
  std::size_t dim = 0;
  {
    std::stringstream header(line);
    std::string cell;
    std::vector<std::string> cols;
    while (std::getline(header, cell, ',')) cols.push_back(cell);
    if (cols.size() < 3 || cols[0] != "split" || cols[1] != "label") {
      throw ConfigError("dataset '" + path.string() + "': header must start with split,label");
    }
    dim = cols.size() - 2;
  }
  Dataset ds;
  ds.input_dim = dim;
  std::vector<double> xtrain, xtest;
  std::size_t line_no = 1, max_label = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::vector<std::string> cells;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    const std::string where = path.string() + ":" + std::to_string(line_no);
    if (cells.size() != dim + 2) {
      throw ConfigError(where + ": expected " + std::to_string(dim + 2) + " fields, got " +
                        std::to_string(cells.size()));
    }
    const bool train = cells[0] == "train";
    if (!train && cells[0] != "test") throw ConfigError(where + ": split must be train or test");
    std::size_t label = 0;
    try {
      std::size_t used = 0;
      const long long v = std::stoll(cells[1], &used);
      if (used != cells[1].size() || v < 0) throw std::invalid_argument("label");
      label = static_cast<std::size_t>(v);
    } catch (const std::exception&) {
      throw ConfigError(where + ": label must be a non-negative integer");
    }
    max_label = std::max(max_label, label);
    auto& xs = train ? xtrain : xtest;
    for (std::size_t j = 0; j < dim; ++j) {
      char* end = nullptr;
      const double v = std::strtod(cells[j + 2].c_str(), &end);
      if (end == cells[j + 2].c_str() || *end != '\0' || !std::isfinite(v)) {
        throw ConfigError(where + ": feature x" + std::to_string(j + 1) + " is not a finite number");
      }
      xs.push_back(v);
    }
    (train ? ds.train.y : ds.test.y).push_back(label);
  }
  if (ds.train.y.empty()) throw ConfigError("dataset '" + path.string() + "' has no train rows");
  ds.classes = max_label + 1;
  ds.train.x = Tensor({ds.train.y.size(), dim}, std::move(xtrain));
  ds.test.x = Tensor({ds.test.y.size(), dim}, std::move(xtest));
  return ds;
}

/// Dataset for a spec; csv datasets are checked against classes/input_dim.
inline Dataset gen_dataset(const DatasetSpec& spec, std::uint64_t seed) {
  switch (spec.kind) {
    case DatasetKind::blobs: return make_blobs(spec, seed);
    case DatasetKind::spirals: return make_spirals(spec, seed);
    case DatasetKind::csv: {
      Dataset ds = read_csv(spec.path);
      if (ds.input_dim != spec.input_dim || ds.classes > spec.classes) {
        throw ConfigError("dataset '" + spec.path + "' has " + std::to_string(ds.input_dim) +
                          " features and " + std::to_string(ds.classes) +
                          " classes; config says " + std::to_string(spec.input_dim) + " and " +
                          std::to_string(spec.classes));
      }
      ds.classes = spec.classes;
      return ds;
    }
  }
  throw ConfigError("unknown dataset kind");
}

inline Dataset gen_dataset(const DatasetSpec& spec) { return gen_dataset(spec, spec.seed); }

}  // namespace sakd::harness
