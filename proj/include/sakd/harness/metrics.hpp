// SPDX-License-Identifier: Apache-2.0
//
// Per-epoch metrics table. One row per (epoch, split):
//
//   epoch,split,tau,lr,ce,kl,kd,routing,total,accuracy,p_spot_1..p_spot_S,gate_spot_1..gate_spot_S
//
// p_spot_i is the fraction of samples the policy routed through the teacher at
// spot i. gate_spot_i is the fraction whose distillation loss was switched on
// (train rows only; it differs from p_spot_i for the non-adaptive strategies).

#pragma once

#include <cstddef>
#include <cstdio>
#include <ostream>
#include <string>
#include <vector>

#include "sakd/trainer.hpp"

namespace sakd::harness {

inline std::vector<std::string> metrics_columns(std::size_t spots) {
  std::vector<std::string> cols = {"epoch", "split", "tau", "lr",    "ce",
                                   "kl",    "kd",    "routing", "total", "accuracy"};
  for (std::size_t s = 1; s <= spots; ++s) cols.push_back("p_spot_" + std::to_string(s));
  for (std::size_t s = 1; s <= spots; ++s) cols.push_back("gate_spot_" + std::to_string(s));
  return cols;
}

inline std::string metrics_header(std::size_t spots) {
  std::string out;
  for (const std::string& c : metrics_columns(spots)) out += (out.empty() ? "" : ",") + c;
  return out;
}

inline std::string metric(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string metrics_row(std::size_t epoch, const char* split, double tau, double lr,
                               const SplitStats& s, std::size_t spots) {
  std::string out = std::to_string(epoch) + "," + split + "," + metric(tau) + "," + metric(lr);
  for (double v : {s.ce, s.kl, s.kd, s.routing, s.total, s.accuracy}) out += "," + metric(v);
  for (std::size_t i = 0; i < spots; ++i) {
    out += ",";
    if (i < s.p_spot.size()) out += metric(s.p_spot[i]);
  }
  for (std::size_t i = 0; i < spots; ++i) {
    out += ",";
    if (i < s.gate_rate.size()) out += metric(s.gate_rate[i]);
  }
  return out;
}

/// Streams rows as epochs finish.
class MetricsWriter {
 public:
  MetricsWriter(std::ostream& out, std::size_t spots, bool with_test)
      : out_(out), spots_(spots), with_test_(with_test) {
    out_ << metrics_header(spots_) << '\n';
  }

  void write(const EpochStats& es) {
    out_ << metrics_row(es.epoch, "train", es.tau, es.lr, es.train, spots_) << '\n';
    if (with_test_) out_ << metrics_row(es.epoch, "test", es.tau, es.lr, es.test, spots_) << '\n';
    out_.flush();
  }

 private:
  std::ostream& out_;
  std::size_t spots_;
  bool with_test_;
};

}  // namespace sakd::harness
