// SPDX-License-Identifier: Apache-2.0
//
// Routing policy: one affine layer over the concatenated last-block features
// of teacher and student, read as N+1 pairs of (teacher, student) log-scores.
// Decisions are Gumbel-max samples in the forward pass with the Gumbel-Softmax
// relaxation carrying the gradient (straight-through).
//
// The affine outputs are used directly as log-scores; the probability-space
// parameterization (log of a softmax) differs only by a per-pair constant,
// which neither the argmax nor the 2-way softmax can see.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <type_traits>
#include <vector>

#include "sakd/errors.hpp"
#include "sakd/network.hpp"
#include "sakd/ops.hpp"
#include "sakd/random.hpp"
#include "sakd/tensor.hpp"

namespace sakd {

struct PolicyParams {
  Affine layer;
  std::size_t spots = 0;  // N + 1
};

template <class P, class F>
  requires std::is_same_v<std::remove_const_t<P>, PolicyParams>
void visit_params(P& policy, F&& f) {
  visit_params(policy.layer, "policy", f);
}

inline PolicyParams make_policy(std::size_t teacher_width, std::size_t student_width,
                                std::size_t spots, std::uint64_t seed) {
  if (spots == 0) throw ConfigError("policy: needs at least one spot");
  Rng rng(seed, 0x706f6c);
  return PolicyParams{make_affine(teacher_width + student_width, spots * 2, rng, 1.0), spots};
}

/// [B x (N+1) x 2] log-scores; channel 0 is the teacher path.
inline Tensor policy_logits(const PolicyParams& policy, const Tensor& feat_t_last,
                            const Tensor& feat_s_last) {
  const Tensor joint = concat(feat_t_last, feat_s_last);
  if (joint.dim(1) != policy.layer.in()) {
    throw ShapeError("policy_logits: features " + to_string(feat_t_last.shape()) + " ++ " +
                     to_string(feat_s_last.shape()) + " for policy input width " +
                     std::to_string(policy.layer.in()));
  }
  return reshape(apply(policy.layer, joint), {joint.dim(0), policy.spots, 2});
}

/// -log(-log u) with u clamped to [1e-12, 1 - 1e-12].
inline double gumbel_transform(double u) {
  u = std::clamp(u, 1e-12, 1.0 - 1e-12);
  return -std::log(-std::log(u));
}

inline Tensor sample_gumbel(const Shape& shape, Rng& rng) {
  std::vector<double> values(numel(shape));
  for (double& v : values) v = gumbel_transform(rng.uniform());
  return Tensor(shape, std::move(values));
}

namespace detail {

inline void require_pairs(const Tensor& logits, const Tensor& noise, const char* op) {
  if (logits.ndim() != 3 || logits.dim(2) != 2) {
    throw ShapeError(std::string(op) + ": expected [B x S x 2] scores, got " +
                     to_string(logits.shape()));
  }
  if (noise.shape() != logits.shape()) {
    throw ShapeError(std::string(op) + ": noise " + to_string(noise.shape()) + " vs scores " +
                     to_string(logits.shape()));
  }
  if (noise.requires_grad()) throw UsageError(std::string(op) + ": noise must be a constant");
}

inline std::vector<std::size_t> channel_columns(std::size_t spots, std::size_t channel) {
  std::vector<std::size_t> cols(spots);
  for (std::size_t s = 0; s < spots; ++s) cols[s] = 2 * s + channel;
  return cols;
}

}  // namespace detail

/// One-hot argmax of the perturbed scores per (sample, spot); ties go to
/// the teacher channel.
inline Tensor gumbel_forward(const Tensor& logits, const Tensor& noise) {
  detail::require_pairs(logits, noise, "gumbel_forward");
  detail::require_finite(logits, "gumbel_forward");
  std::vector<double> out(logits.size());
  for (std::size_t i = 0; i < out.size(); i += 2) {
    const bool teacher = logits[i] + noise[i] >= logits[i + 1] + noise[i + 1];
    out[i] = teacher ? 1.0 : 0.0;
    out[i + 1] = teacher ? 0.0 : 1.0;
  }
  return Tensor(logits.shape(), std::move(out));
}

/// softmax((scores + noise) / tau) over each pair.
inline Tensor gumbel_relaxed(const Tensor& logits, const Tensor& noise, double tau) {
  if (!(tau > 0.0)) throw ConfigError("gumbel_relaxed: tau must be > 0");
  detail::require_pairs(logits, noise, "gumbel_relaxed");
  const Shape shape = logits.shape();
  const Tensor perturbed = scale(add(logits, noise), 1.0 / tau);
  return reshape(softmax(reshape(perturbed, {shape[0] * shape[1], 2})), shape);
}

struct RoutingDecision {
  Tensor forward_w;     // [B x (N+1)], 1 = teacher path
  Tensor relaxed_w;     // [B x (N+1)], teacher channel of the relaxation
  Tensor relaxed_pair;  // [B x (N+1) x 2]
  Tensor value;         // forward_w in value, relaxed_w in gradient
  double tau = 1.0;

  std::size_t batch() const { return forward_w.dim(0); }
  std::size_t spots() const { return forward_w.dim(1); }
};

/// Teacher-channel view [B x S] of a [B x S x 2] tensor.
inline Tensor teacher_channel(const Tensor& pairs) {
  const std::size_t b = pairs.dim(0), s = pairs.dim(1);
  return gather_cols(reshape(pairs, {b, 2 * s}), detail::channel_columns(s, 0));
}

inline RoutingDecision straight_through(const Tensor& logits, const Tensor& noise, double tau) {
  RoutingDecision d;
  d.tau = tau;
  d.relaxed_pair = gumbel_relaxed(logits, noise, tau);
  d.relaxed_w = teacher_channel(d.relaxed_pair);
  d.forward_w = teacher_channel(gumbel_forward(logits, noise));
  d.value = straight_through(d.forward_w, d.relaxed_w);
  return d;
}

/// Exponential temperature decay with a floor.
struct TauSchedule {
  double tau0 = 5.0;
  double tau_min = 0.5;
  double decay = 1.0;

  /// Decay chosen so the floor is reached at the last of `epochs` epochs.
  static TauSchedule reaching_floor(std::size_t epochs, double tau0 = 5.0, double tau_min = 0.5) {
    TauSchedule s{tau0, tau_min, 1.0};
    if (epochs > 1) s.decay = std::pow(tau_min / tau0, 1.0 / static_cast<double>(epochs - 1));
    return s;
  }

  void validate() const {
    if (!(tau_min > 0.0)) throw ConfigError("tau: tau_min must be > 0");
    if (!(tau0 >= tau_min)) throw ConfigError("tau: tau0 must be >= tau_min");
    if (!(decay > 0.0 && decay <= 1.0)) throw ConfigError("tau: decay must be in (0, 1]");
  }
};

inline double tau_at(const TauSchedule& schedule, std::size_t epoch) {
  return std::max(schedule.tau_min,
                  schedule.tau0 * std::pow(schedule.decay, static_cast<double>(epoch)));
}

}  // namespace sakd
