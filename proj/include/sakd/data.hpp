// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "sakd/errors.hpp"
#include "sakd/tensor.hpp"

namespace sakd {

struct LabeledSplit {
  Tensor x;                          // [n x input_dim]
  std::vector<std::size_t> y;        // n labels

  std::size_t size() const { return y.size(); }
};

struct Dataset {
  std::size_t input_dim = 0;
  std::size_t classes = 0;
  LabeledSplit train;
  LabeledSplit test;
};

/// Constant copy of the given rows of a matrix.
inline Tensor select_rows(const Tensor& x, std::span<const std::size_t> rows) {
  if (x.ndim() != 2) throw ShapeError("select_rows: expected a matrix, got " + to_string(x.shape()));
  const std::size_t cols = x.dim(1);
  std::vector<double> out;
  out.reserve(rows.size() * cols);
  for (std::size_t r : rows) {
    if (r >= x.dim(0)) throw IndexError("select_rows: row " + std::to_string(r) + " out of range");
    const double* src = x.data() + r * cols;
    out.insert(out.end(), src, src + cols);
  }
  return Tensor({rows.size(), cols}, std::move(out));
}

template <class T>
std::vector<T> select(std::span<const T> values, std::span<const std::size_t> idx) {
  std::vector<T> out;
  out.reserve(idx.size());
  for (std::size_t i : idx) out.push_back(values[i]);
  return out;
}

}  // namespace sakd
