// SPDX-License-Identifier: Apache-2.0
//
// Multi-path routing network: teacher and student blocks interleaved under a
// per-sample, per-spot routing decision, with adaption maps cross-feeding the
// two streams at every spot.

#pragma once

#include <cstddef>
#include <span>
#include <string>

#include "sakd/errors.hpp"
#include "sakd/network.hpp"
#include "sakd/ops.hpp"
#include "sakd/policy.hpp"
#include "sakd/tensor.hpp"

namespace sakd {

struct RoutingNetwork {
  Network teacher;
  Network student;
  AdaptionSet adaptions;
  PolicyParams policy;

  std::size_t blocks() const { return teacher.spec.block_count(); }
  std::size_t spots() const { return blocks() + 1; }

  void validate() const {
    if (teacher.spec.block_count() != student.spec.block_count()) {
      throw ConfigError("routing: teacher has " + std::to_string(teacher.spec.block_count()) +
                        " blocks but student has " + std::to_string(student.spec.block_count()));
    }
    if (teacher.spec.input_dim != student.spec.input_dim ||
        teacher.spec.classifier_dim != student.spec.classifier_dim) {
      throw ConfigError("routing: teacher and student disagree on input or class count");
    }
    if (adaptions.ts.size() != blocks() || adaptions.st.size() != blocks()) {
      throw ConfigError("routing: adaption set does not cover every spot");
    }
    if (policy.spots != spots()) {
      throw ConfigError("routing: policy emits " + std::to_string(policy.spots) +
                        " spots, network has " + std::to_string(spots()));
    }
  }
};

/// Routing logits for weights `w` [B x (N+1)] (1 = teacher path). Student
/// parameters enter as constants: gradients flow through the student blocks
/// to their inputs but never reach student weights. The teacher is used as
/// given (constant unless it was bound for co-training).
inline Tensor routing_forward(const RoutingNetwork& rn, const Tensor& x, const Tensor& w) {
  const std::size_t n = rn.blocks();
  if (w.ndim() != 2 || w.dim(1) != n + 1) {
    throw ConfigError("routing_forward: decision has " +
                      (w.ndim() == 2 ? std::to_string(w.dim(1)) : to_string(w.shape())) +
                      " spots, network needs " + std::to_string(n + 1));
  }
  if (w.dim(0) != x.dim(0)) {
    throw ShapeError("routing_forward: decision batch " + std::to_string(w.dim(0)) +
                     " vs input batch " + std::to_string(x.dim(0)));
  }
  const Network student = detach_params(rn.student);

  Tensor input_t = x;
  Tensor input_s = x;
  for (std::size_t i = 0; i < n; ++i) {
    const Tensor f_t = forward_block(rn.teacher, i, input_t);
    const Tensor f_s = forward_block(student, i, input_s);
    const Tensor wi = column(w, i);
    input_s = convex_combine(adapt(rn.adaptions, i + 1, AdaptDirection::ts, f_t), f_s, wi);
    input_t = convex_combine(f_t, adapt(rn.adaptions, i + 1, AdaptDirection::st, f_s), wi);
  }
  const Tensor out_t = forward_classifier(rn.teacher, input_t);
  const Tensor out_s = forward_classifier(student, input_s);
  return convex_combine(out_t, out_s, column(w, n));
}

inline Tensor routing_forward(const RoutingNetwork& rn, const Tensor& x,
                              const RoutingDecision& decision) {
  return routing_forward(rn, x, decision.value);
}

/// beta3 * cross-entropy of the routing logits.
inline Tensor routing_loss(const Tensor& routing_logits, std::span<const std::size_t> targets,
                           double beta3) {
  if (!(beta3 >= 0.0)) throw ConfigError("routing_loss: beta3 must be >= 0");
  return scale(cross_entropy(routing_logits, targets), beta3);
}

}  // namespace sakd
