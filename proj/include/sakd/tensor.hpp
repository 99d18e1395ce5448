// SPDX-License-Identifier: Apache-2.0
//
// Dense 64-bit tensors and the reverse-mode tape they are recorded on.
//
// A Tensor is an immutable value (shape + shared row-major storage) plus an
// optional (tape, node) handle. Tensors without a handle are constants: ops
// over constants produce constants and record nothing. Trainable values enter
// a tape through Tape::leaf(); every op whose inputs include a taped tensor
// appends one node, so append order is a valid topological order.

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <limits>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "sakd/errors.hpp"

namespace sakd {

using Shape = std::vector<std::size_t>;
using NodeId = std::size_t;
inline constexpr NodeId kNoNode = std::numeric_limits<NodeId>::max();

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

class Tape;

class Tensor {
 public:
  Tensor() : Tensor(Shape{}, std::vector<double>{0.0}) {}

  Tensor(Shape shape, std::vector<double> values)
      : shape_(std::move(shape)),
        values_(std::make_shared<const std::vector<double>>(std::move(values))) {
    if (values_->size() != numel(shape_)) {
      throw ShapeError("tensor of shape " + to_string(shape_) + " needs " +
                       std::to_string(numel(shape_)) + " values, got " +
                       std::to_string(values_->size()));
    }
  }

  static Tensor full(Shape shape, double value) {
    const std::size_t n = numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value));
  }
  static Tensor zeros(Shape shape) { return full(std::move(shape), 0.0); }
  static Tensor scalar(double value) { return Tensor(Shape{}, {value}); }
  static Tensor vector(std::vector<double> values) {
    const std::size_t n = values.size();
    return Tensor(Shape{n}, std::move(values));
  }
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows) {
    std::vector<double> values;
    std::size_t cols = rows.size() ? rows.begin()->size() : 0;
    for (const auto& row : rows) {
      if (row.size() != cols) throw ShapeError("ragged matrix literal");
      values.insert(values.end(), row.begin(), row.end());
    }
    return Tensor(Shape{rows.size(), cols}, std::move(values));
  }

  const Shape& shape() const { return shape_; }
  std::size_t ndim() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const { return values_->size(); }
  std::span<const double> values() const { return *values_; }
  const double* data() const { return values_->data(); }
  double operator[](std::size_t i) const { return (*values_)[i]; }
  double at(std::size_t row, std::size_t col) const {
    return (*values_)[row * shape_.back() + col];
  }
  double item() const {
    if (size() != 1) throw UsageError("item() on tensor of shape " + to_string(shape_));
    return (*values_)[0];
  }

  bool requires_grad() const { return tape_ != nullptr; }
  Tape* tape() const { return tape_; }
  NodeId node() const { return node_; }

  /// Same storage, no tape handle.
  Tensor detached() const {
    Tensor out = *this;
    out.tape_ = nullptr;
    out.node_ = kNoNode;
    return out;
  }

  /// Bitwise value equality (shape and storage), ignoring tape handles.
  bool same_values(const Tensor& other) const {
    return shape_ == other.shape_ && *values_ == *other.values_;
  }

 private:
  friend class Tape;

  Shape shape_;
  std::shared_ptr<const std::vector<double>> values_;
  Tape* tape_ = nullptr;
  NodeId node_ = kNoNode;
};

enum class OpKind : std::uint8_t {
  leaf,
  matmul,
  transpose,
  add,
  sub,
  mul,
  scale,
  add_scalar,
  relu,
  add_row_bias,
  scale_rows,
  concat,
  reshape,
  gather_cols,
  softmax,
  log_softmax,
  cross_entropy,
  kl_divergence,
  convex_combine,
  sum,
  mean,
  row_sum,
  abs_pow,
  normalize_rows,
  straight_through,
};

inline std::string_view op_name(OpKind kind) {
  switch (kind) {
    case OpKind::leaf: return "leaf";
    case OpKind::matmul: return "matmul";
    case OpKind::transpose: return "transpose";
    case OpKind::add: return "add";
    case OpKind::sub: return "sub";
    case OpKind::mul: return "mul";
    case OpKind::scale: return "scale";
    case OpKind::add_scalar: return "add_scalar";
    case OpKind::relu: return "relu";
    case OpKind::add_row_bias: return "add_row_bias";
    case OpKind::scale_rows: return "scale_rows";
    case OpKind::concat: return "concat";
    case OpKind::reshape: return "reshape";
    case OpKind::gather_cols: return "gather_cols";
    case OpKind::softmax: return "softmax";
    case OpKind::log_softmax: return "log_softmax";
    case OpKind::cross_entropy: return "cross_entropy";
    case OpKind::kl_divergence: return "kl_divergence";
    case OpKind::convex_combine: return "convex_combine";
    case OpKind::sum: return "sum";
    case OpKind::mean: return "mean";
    case OpKind::row_sum: return "row_sum";
    case OpKind::abs_pow: return "abs_pow";
    case OpKind::normalize_rows: return "normalize_rows";
    case OpKind::straight_through: return "straight_through";
  }
  return "?";
}

/// Accumulation target handed to a node's backward function. Slot k refers to
/// the node's k-th input; constant inputs are never wanted.
class GradSink {
 public:
  GradSink(std::vector<std::vector<double>>& grads, const std::vector<NodeId>& inputs,
           const std::vector<std::size_t>& sizes)
      : grads_(grads), inputs_(inputs), sizes_(sizes) {}

  bool wants(std::size_t k) const { return inputs_[k] != kNoNode; }

  std::span<double> operator[](std::size_t k) {
    auto& g = grads_[inputs_[k]];
    if (g.empty()) g.assign(sizes_[k], 0.0);
    return g;
  }

 private:
  std::vector<std::vector<double>>& grads_;
  const std::vector<NodeId>& inputs_;
  const std::vector<std::size_t>& sizes_;
};

using BackwardFn = std::function<void(std::span<const double> grad_out, GradSink& sink)>;

struct TapeNode {
  OpKind kind;
  std::vector<NodeId> inputs;       // kNoNode marks a constant input
  std::vector<std::size_t> input_sizes;
  Shape shape;
  BackwardFn backward;              // empty for leaves
};

/// Gradients of leaf tensors. A leaf missing from the map has exactly zero
/// gradient (it was unreachable from the loss).
class GradMap {
 public:
  bool contains(NodeId node) const { return grads_.count(node) != 0; }
  bool contains(const Tensor& t) const { return t.requires_grad() && contains(t.node()); }

  const Tensor* find(const Tensor& t) const {
    if (!t.requires_grad()) return nullptr;
    auto it = grads_.find(t.node());
    return it == grads_.end() ? nullptr : &it->second;
  }

  const Tensor& at(const Tensor& t) const {
    const Tensor* g = find(t);
    if (!g) throw UsageError("no gradient recorded for tensor");
    return *g;
  }

  std::size_t size() const { return grads_.size(); }
  auto begin() const { return grads_.begin(); }
  auto end() const { return grads_.end(); }

  /// Gradients aligned with `params`; nullopt where absent.
  std::vector<std::optional<Tensor>> gather(std::span<const Tensor* const> params) const {
    std::vector<std::optional<Tensor>> out;
    out.reserve(params.size());
    for (const Tensor* p : params) {
      const Tensor* g = find(*p);
      out.push_back(g ? std::optional<Tensor>(*g) : std::nullopt);
    }
    return out;
  }

  bool operator==(const GradMap& other) const {
    if (grads_.size() != other.grads_.size()) return false;
    for (auto it = grads_.begin(), jt = other.grads_.begin(); it != grads_.end(); ++it, ++jt) {
      if (it->first != jt->first || !it->second.same_values(jt->second)) return false;
    }
    return true;
  }

 private:
  friend class Tape;
  std::map<NodeId, Tensor> grads_;
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Registers `value` as a differentiable variable on this tape.
  Tensor leaf(const Tensor& value) {
    Tensor out = value.detached();
    out.tape_ = this;
    out.node_ = nodes_.size();
    nodes_.push_back(TapeNode{OpKind::leaf, {}, {}, value.shape(), {}});
    return out;
  }

  std::size_t size() const { return nodes_.size(); }
  const TapeNode& node(NodeId id) const { return nodes_.at(id); }

  /// Reverse accumulation from a scalar loss. Does not consume the tape.
  GradMap backward(const Tensor& loss) const {
    if (loss.size() != 1) {
      throw UsageError("backward() needs a scalar loss, got shape " + to_string(loss.shape()));
    }
    if (loss.tape() != this) throw UsageError("backward() on a tensor not recorded on this tape");

    std::vector<std::vector<double>> grads(nodes_.size());
    grads[loss.node()] = {1.0};
    GradMap out;
    for (NodeId n = loss.node() + 1; n-- > 0;) {
      if (grads[n].empty()) continue;
      const TapeNode& node = nodes_[n];
      if (node.kind == OpKind::leaf) {
        out.grads_.emplace(n, Tensor(node.shape, std::move(grads[n])));
        continue;
      }
      GradSink sink(grads, node.inputs, node.input_sizes);
      node.backward(grads[n], sink);
      grads[n].clear();
      grads[n].shrink_to_fit();
    }
    return out;
  }

  /// Builds the op result; appends a node when any input is taped.
  static Tensor record(OpKind kind, std::initializer_list<const Tensor*> inputs, Shape shape,
                       std::vector<double> values, BackwardFn backward) {
    Tape* tape = nullptr;
    for (const Tensor* in : inputs) {
      if (!in->requires_grad()) continue;
      if (tape && in->tape() != tape) {
        throw UsageError(std::string(op_name(kind)) + ": inputs recorded on different tapes");
      }
      tape = in->tape();
    }
    Tensor out(std::move(shape), std::move(values));
    if (!tape) return out;

    TapeNode node{kind, {}, {}, out.shape(), std::move(backward)};
    for (const Tensor* in : inputs) {
      node.inputs.push_back(in->requires_grad() ? in->node() : kNoNode);
      node.input_sizes.push_back(in->size());
    }
    out.tape_ = tape;
    out.node_ = tape->nodes_.size();
    tape->nodes_.push_back(std::move(node));
    return out;
  }

 private:
  std::vector<TapeNode> nodes_;
};

}  // namespace sakd
