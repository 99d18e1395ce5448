// SPDX-License-Identifier: Apache-2.0
//
// Central-difference oracle for the tape. The analytic side runs one backward
// pass; the numeric side re-evaluates the function on constant inputs, so it
// never touches the code path it is checking.

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sakd/errors.hpp"
#include "sakd/tensor.hpp"

namespace sakd {

struct FiniteDiffReport {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t worst_input = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t coordinates = 0;
};

inline double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / denom;
}

using MultiScalarFn = std::function<Tensor(std::span<const Tensor>)>;

/// Compares externally computed gradients (`analytic[k]` absent = zero)
/// against central differences of `f` evaluated on constant inputs.
inline FiniteDiffReport finite_diff_against(const MultiScalarFn& f, const std::vector<Tensor>& inputs,
                                            std::span<const std::optional<Tensor>> analytic,
                                            double eps = 1e-5) {
  if (!(eps > 0.0)) throw ConfigError("finite_diff_check: step must be > 0");
  if (analytic.size() != inputs.size()) {
    throw ShapeError("finite_diff_against: " + std::to_string(analytic.size()) + " gradients for " +
                     std::to_string(inputs.size()) + " inputs");
  }
  FiniteDiffReport report;
  std::vector<Tensor> probe(inputs.begin(), inputs.end());
  for (auto& p : probe) p = p.detached();
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const Tensor* g = analytic[k] ? &*analytic[k] : nullptr;
    if (g && g->shape() != inputs[k].shape()) {
      throw ShapeError("finite_diff_against: gradient " + to_string(g->shape()) + " for input " +
                       to_string(inputs[k].shape()));
    }
    std::vector<double> values(inputs[k].values().begin(), inputs[k].values().end());
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + eps;
      probe[k] = Tensor(inputs[k].shape(), values);
      const double up = f(probe).item();
      values[i] = saved - eps;
      probe[k] = Tensor(inputs[k].shape(), values);
      const double down = f(probe).item();
      values[i] = saved;
      if (!std::isfinite(up) || !std::isfinite(down)) {
        throw NumericError("finite_diff_check: non-finite f at perturbed input");
      }
      const double numeric = (up - down) / (2.0 * eps);
      const double a = g ? (*g)[i] : 0.0;
      const double rel = relative_error(a, numeric);
      report.max_abs_error = std::max(report.max_abs_error, std::abs(a - numeric));
      if (rel > report.max_rel_error || report.coordinates == 0) {
        report.max_rel_error = std::max(report.max_rel_error, rel);
        report.worst_input = k;
        report.worst_index = i;
        report.worst_analytic = a;
        report.worst_numeric = numeric;
      }
      ++report.coordinates;
    }
    probe[k] = inputs[k].detached();
  }
  return report;
}

/// Checks d f / d inputs[k] for every coordinate of every input.
inline FiniteDiffReport finite_diff_check(const MultiScalarFn& f, const std::vector<Tensor>& inputs,
                                          double eps = 1e-5) {
  Tape tape;
  std::vector<Tensor> leaves;
  leaves.reserve(inputs.size());
  for (const Tensor& x : inputs) leaves.push_back(tape.leaf(x));
  const Tensor loss = f(leaves);
  if (!std::isfinite(loss.item())) throw NumericError("finite_diff_check: non-finite f(x)");
  const GradMap grads = loss.requires_grad() ? tape.backward(loss) : GradMap{};
  std::vector<std::optional<Tensor>> analytic;
  for (const Tensor& leaf : leaves) {
    const Tensor* g = grads.find(leaf);
    analytic.push_back(g ? std::optional<Tensor>(*g) : std::nullopt);
  }
  return finite_diff_against(f, inputs, analytic, eps);
}

/// Single-input convenience form.
inline FiniteDiffReport finite_diff_check(const std::function<Tensor(const Tensor&)>& f,
                                          const Tensor& x, double eps = 1e-5) {
  return finite_diff_check([&f](std::span<const Tensor> xs) { return f(xs[0]); },
                           std::vector<Tensor>{x}, eps);
}

}  // namespace sakd
