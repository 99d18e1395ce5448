// SPDX-License-Identifier: Apache-2.0
//
// Finite-difference verification suites behind `sakd gradcheck`.

#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sakd/distillers.hpp"
#include "sakd/finite_diff.hpp"
#include "sakd/network.hpp"
#include "sakd/ops.hpp"
#include "sakd/policy.hpp"
#include "sakd/random.hpp"
#include "sakd/routing.hpp"
#include "sakd/trainer.hpp"

namespace sakd::harness {

inline constexpr double kGradcheckTolerance = 1e-4;

struct GradcheckEntry {
  std::string scope;
  std::string name;
  double max_rel_error = 0.0;
  std::size_t coordinates = 0;
  bool passed = true;
  std::string worst;  // "input k[i]" of the largest error
};

struct GradcheckReport {
  std::vector<GradcheckEntry> entries;

  bool passed() const {
    for (const auto& e : entries) {
      if (!e.passed) return false;
    }
    return true;
  }
  double max_rel_error(const std::string& scope) const {
    double m = 0.0;
    for (const auto& e : entries) {
      if (e.scope == scope) m = std::max(m, e.max_rel_error);
    }
    return m;
  }
};

inline std::string short_number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

namespace gc {

inline Tensor random_tensor(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(numel(shape));
  for (double& x : v) x = rng.uniform(lo, hi);
  return Tensor(shape, std::move(v));
}

/// Entries with magnitude in [0.2, 1.2] and random sign, away from kinks.
inline Tensor away_from_zero(const Shape& shape, Rng& rng) {
  std::vector<double> v(numel(shape));
  for (double& x : v) x = (rng.bernoulli(0.5) ? 1.0 : -1.0) * rng.uniform(0.2, 1.2);
  return Tensor(shape, std::move(v));
}

/// sum(f .* c) for a fixed random c, so every output coordinate matters.
inline Tensor weighted_sum(const Tensor& y, std::uint64_t seed) {
  Rng rng(seed, 0x777);
  return sum(mul(y, random_tensor(y.shape(), rng)));
}

inline std::vector<Tensor> values_of(const auto& module) {
  std::vector<Tensor> out;
  visit_params(module, [&](const std::string&, const Tensor& t) { out.push_back(t.detached()); });
  return out;
}

/// Copy of `module` with parameters taken from vals[offset...] in visit order.
template <class M>
M with_values(const M& module, std::span<const Tensor> vals, std::size_t& offset) {
  M out = module;
  visit_params(out, [&](const std::string&, Tensor& t) { t = vals[offset++]; });
  return out;
}

/// Adds U(-0.1, 0.1) to every parameter. Fresh networks have zero biases, so
/// an all-zero hidden row sits exactly on a ReLU kink; jitter moves the check
/// to a generic point.
template <class M>
M jittered(const M& module, std::uint64_t seed) {
  Rng rng(seed, 0x6a6974);
  M out = module;
  visit_params(out, [&](const std::string&, Tensor& t) {
    std::vector<double> v(t.values().begin(), t.values().end());
    for (double& x : v) x += rng.uniform(-0.1, 0.1);
    t = Tensor(t.shape(), std::move(v));
  });
  return out;
}

inline void append(std::vector<Tensor>& dst, const std::vector<Tensor>& src) {
  dst.insert(dst.end(), src.begin(), src.end());
}

class Suite {
 public:
  Suite(GradcheckReport& report, std::string scope) : report_(report), scope_(std::move(scope)) {}

  void fd(const std::string& name, const MultiScalarFn& f, const std::vector<Tensor>& inputs) {
    record(name, finite_diff_check(f, inputs));
  }
  void against(const std::string& name, const MultiScalarFn& f, const std::vector<Tensor>& inputs,
               std::span<const std::optional<Tensor>> analytic) {
    record(name, finite_diff_against(f, inputs, analytic));
  }
  void exact(const std::string& name, bool holds, std::size_t coordinates) {
    report_.entries.push_back({scope_, name, holds ? 0.0 : std::numeric_limits<double>::infinity(),
                               coordinates, holds, ""});
  }

 private:
  void record(const std::string& name, const FiniteDiffReport& r) {
    report_.entries.push_back({scope_, name, r.max_rel_error, r.coordinates,
                               r.max_rel_error <= kGradcheckTolerance,
                               "input " + std::to_string(r.worst_input) + "[" +
                                   std::to_string(r.worst_index) + "] analytic " +
                                   short_number(r.worst_analytic) + " numeric " +
                                   short_number(r.worst_numeric)});
  }
  GradcheckReport& report_;
  std::string scope_;
};

/// Routing forward with mixing written as w a + (1 - w) b from elementary ops,
/// so it accepts weights outside [0, 1]. Used as the independent evaluation
/// path. The form is exact at w in {0, 1}, so a coordinate with no true
/// gradient shows no rounding noise.
inline Tensor reference_routing(const Network& teacher, const Network& student,
                                const AdaptionSet& adaptions, const Tensor& x, const Tensor& w) {
  auto mix = [](const Tensor& a, const Tensor& b, const Tensor& wi) {
    return add(scale_rows(a, wi), scale_rows(b, add(scale(wi, -1.0), 1.0)));
  };
  Tensor in_t = x, in_s = x;
  const std::size_t n = teacher.spec.block_count();
  for (std::size_t i = 0; i < n; ++i) {
    const Tensor f_t = forward_block(teacher, i, in_t);
    const Tensor f_s = forward_block(student, i, in_s);
    const Tensor wi = column(w, i);
    in_s = mix(adapt(adaptions, i + 1, AdaptDirection::ts, f_t), f_s, wi);
    in_t = mix(f_t, adapt(adaptions, i + 1, AdaptDirection::st, f_s), wi);
  }
  return mix(forward_classifier(teacher, in_t), forward_classifier(student, in_s), column(w, n));
}

}  // namespace gc

// ---------------------------------------------------------------------------

inline void gradcheck_ops(GradcheckReport& report, std::uint64_t seed = 17) {
  gc::Suite s(report, "ops");
  Rng rng(seed, 1);
  using Xs = std::span<const Tensor>;
  const std::vector<std::size_t> targets = {2, 0, 4};

  for (int draw = 0; draw < 3; ++draw) {
    const std::string tag = "#" + std::to_string(draw);
    const Tensor a = gc::random_tensor({3, 4}, rng), b = gc::random_tensor({3, 4}, rng);
    const Tensor m = gc::random_tensor({4, 2}, rng), nz = gc::away_from_zero({3, 4}, rng);
    const Tensor bias = gc::random_tensor({4}, rng), rw = gc::random_tensor({3}, rng);
    const Tensor logits = gc::random_tensor({3, 5}, rng, -3.0, 3.0);
    const Tensor teacher = gc::random_tensor({3, 5}, rng, -3.0, 3.0);
    const Tensor w = gc::random_tensor({3}, rng, 0.2, 0.8);
    const std::uint64_t k = seed + static_cast<std::uint64_t>(draw);

    s.fd("matmul" + tag, [&](Xs x) { return gc::weighted_sum(matmul(x[0], x[1]), k); }, {a, m});
    s.fd("transpose" + tag, [&](Xs x) { return gc::weighted_sum(transpose(x[0]), k); }, {a});
    s.fd("add" + tag, [&](Xs x) { return gc::weighted_sum(add(x[0], x[1]), k); }, {a, b});
    s.fd("sub" + tag, [&](Xs x) { return gc::weighted_sum(sub(x[0], x[1]), k); }, {a, b});
    s.fd("mul" + tag, [&](Xs x) { return gc::weighted_sum(mul(x[0], x[1]), k); }, {a, b});
    s.fd("scale" + tag, [&](Xs x) { return gc::weighted_sum(scale(x[0], -1.7), k); }, {a});
    s.fd("add_scalar" + tag, [&](Xs x) { return gc::weighted_sum(add(x[0], 0.3), k); }, {a});
    s.fd("relu" + tag, [&](Xs x) { return gc::weighted_sum(relu(x[0]), k); }, {nz});
    for (double p : {1.0, 1.5, 2.0, 3.0}) {
      s.fd("abs_pow(p=" + short_number(p) + ")" + tag,
           [&](Xs x) { return gc::weighted_sum(abs_pow(x[0], p), k); }, {nz});
    }
    s.fd("add_row_bias" + tag, [&](Xs x) { return gc::weighted_sum(add_row_bias(x[0], x[1]), k); },
         {a, bias});
    s.fd("scale_rows" + tag, [&](Xs x) { return gc::weighted_sum(scale_rows(x[0], x[1]), k); },
         {a, rw});
    s.fd("concat" + tag, [&](Xs x) { return gc::weighted_sum(concat(x[0], x[1]), k); }, {a, b});
    s.fd("reshape" + tag, [&](Xs x) { return gc::weighted_sum(reshape(x[0], {2, 6}), k); }, {a});
    s.fd("gather_cols" + tag,
         [&](Xs x) { return gc::weighted_sum(gather_cols(x[0], {3, 0, 3, 1}), k); }, {a});
    s.fd("softmax" + tag, [&](Xs x) { return gc::weighted_sum(softmax(x[0]), k); }, {logits});
    s.fd("log_softmax" + tag, [&](Xs x) { return gc::weighted_sum(log_softmax(x[0]), k); }, {logits});
    s.fd("cross_entropy" + tag, [&](Xs x) { return cross_entropy(x[0], targets); }, {logits});
    s.fd("kl_divergence" + tag,
         [&](Xs x) { return gc::weighted_sum(kl_divergence(x[0], teacher, 4.0, true), k); },
         {logits});
    s.fd("convex_combine" + tag,
         [&](Xs x) { return gc::weighted_sum(convex_combine(x[0], x[1], x[2]), k); }, {a, b, w});
    s.fd("sum" + tag, [&](Xs x) { return scale(sum(x[0]), 0.7); }, {a});
    s.fd("mean" + tag, [&](Xs x) { return scale(mean(x[0]), 0.7); }, {a});
    s.fd("row_sum" + tag, [&](Xs x) { return gc::weighted_sum(row_sum(x[0]), k); }, {a});
    s.fd("normalize_rows" + tag, [&](Xs x) { return gc::weighted_sum(normalize_rows(x[0]), k); },
         {a});
    std::vector<double> bits(15);
    for (double& v : bits) v = rng.bernoulli(0.5) ? 1.0 : 0.0;
    {
      // The value is the constant hard decision; the gradient passes to the
      // soft input unchanged.
      const Tensor hard({3, 5}, bits), c = gc::random_tensor({3, 5}, rng);
      Tape tape;
      const Tensor soft = tape.leaf(gc::random_tensor({3, 5}, rng));
      const Tensor st = straight_through(hard, soft);
      const GradMap g = tape.backward(sum(mul(st, c)));
      const Tensor* gs = g.find(soft);
      s.exact("straight_through" + tag, st.same_values(hard) && gs && gs->same_values(c), 15);
    }
  }
}

// ---------------------------------------------------------------------------

inline void gradcheck_network(GradcheckReport& report, std::uint64_t seed = 23) {
  gc::Suite s(report, "network");
  using Xs = std::span<const Tensor>;
  Rng rng(seed, 2);

  NetworkSpec tspec{5, {BlockSpec{{{6, Activation::relu}, {8, Activation::none}}},
                        BlockSpec{{{8, Activation::relu}}}}, 3};
  NetworkSpec sspec = uniform_spec(5, 2, 4, 3);
  const Network teacher = gc::jittered(build_network(tspec, seed), seed);
  const Network student = gc::jittered(build_network(sspec, seed + 1), seed + 1);
  const Tensor x = gc::random_tensor({4, 5}, rng, -2.0, 2.0);
  const std::vector<std::size_t> y = {0, 2, 1, 2};

  {
    std::vector<Tensor> in = gc::values_of(teacher);
    in.push_back(x);
    s.fd("forward_features",
         [&](Xs v) {
           std::size_t off = 0;
           const Network net = gc::with_values(teacher, v, off);
           const FeatureBundle b = forward_features(net, v[off]);
           Tensor loss = cross_entropy(b.logits, y);
           for (std::size_t i = 0; i < b.block_features.size(); ++i) {
             loss = add(loss, gc::weighted_sum(b.block_features[i], seed + i));
           }
           return loss;
         },
         in);
  }

  const AdaptionSet ad = make_adaptions(tspec, sspec, seed + 2);
  {
    const Tensor ft = gc::random_tensor({4, 8}, rng), fs = gc::random_tensor({4, 4}, rng);
    std::vector<Tensor> in = gc::values_of(ad);
    in.push_back(ft);
    in.push_back(fs);
    s.fd("adaptions",
         [&](Xs v) {
           std::size_t off = 0;
           const AdaptionSet a = gc::with_values(ad, v, off);
           Tensor loss = Tensor::scalar(0.0);
           for (std::size_t spot = 1; spot <= 2; ++spot) {
             loss = add(loss, gc::weighted_sum(adapt(a, spot, AdaptDirection::ts, v[off]), spot));
             loss = add(loss, gc::weighted_sum(adapt(a, spot, AdaptDirection::st, v[off + 1]), spot + 7));
           }
           return loss;
         },
         in);
  }

  {
    DistillConfig cfg = DistillConfig::defaults(DistillerKind::fitnets, 2);
    const HintProjections hints = make_hints(cfg, tspec, sspec, seed + 3);
    const Tensor fs = gc::random_tensor({4, 4}, rng), ft = gc::random_tensor({4, 8}, rng);
    std::vector<Tensor> in = gc::values_of(hints);
    in.push_back(fs);
    s.fd("fitnets_hint",
         [&](Xs v) {
           std::size_t off = 0;
           const HintProjections h = gc::with_values(hints, v, off);
           return gc::weighted_sum(fitnets_hint(v[off], ft, h.find(2)), seed);
         },
         in);
    const Tensor fs8 = gc::away_from_zero({4, 8}, rng), ft4 = gc::away_from_zero({4, 4}, rng);
    s.fd("attention_transfer(wide teacher)",
         [&](Xs v) { return gc::weighted_sum(attention_transfer(v[0], ft, 2.0), seed); },
         {gc::away_from_zero({4, 4}, rng)});
    s.fd("attention_transfer(wide student)",
         [&](Xs v) { return gc::weighted_sum(attention_transfer(v[0], ft4, 2.0), seed); }, {fs8});
    s.fd("sp_loss", [&](Xs v) { return sp_loss(v[0], ft); }, {fs});
  }

  {
    // Student objective with a random binary gate, for each distiller.
    Tensor d = gc::random_tensor({4, 3}, rng, 0.0, 1.0);
    std::vector<double> gate(d.values().begin(), d.values().end());
    for (double& g : gate) g = g < 0.5 ? 0.0 : 1.0;
    gate[0] = gate[4] = gate[8] = 1.0;
    d = Tensor({4, 3}, gate);
    const NetworkSpec tsq = uniform_spec(5, 2, 8, 3);
    const Network t2 = gc::jittered(build_network(tsq, seed + 4), seed + 4);
    const FeatureBundle bt = forward_features(t2, x);
    for (DistillerKind kind : {DistillerKind::kd_kl, DistillerKind::fitnets, DistillerKind::at,
                               DistillerKind::sp}) {
      DistillConfig cfg = DistillConfig::defaults(kind, 2);
      cfg.spots.intermediate = kind == DistillerKind::kd_kl ? std::vector<std::size_t>{}
                                                            : std::vector<std::size_t>{1, 2};
      cfg.beta2 = kind == DistillerKind::kd_kl ? 0.0 : 1.0;
      const HintProjections hints = make_hints(cfg, tsq, sspec, seed + 5);
      std::vector<Tensor> in = gc::values_of(student);
      gc::append(in, gc::values_of(hints));
      s.fd("student_loss(" + std::string(to_string(kind)) + ")",
           [&](Xs v) {
             std::size_t off = 0;
             const Network net = gc::with_values(student, v, off);
             const HintProjections h = gc::with_values(hints, v, off);
             return assemble_student_loss(forward_features(net, x), bt, y, d, cfg, h).total;
           },
           in);
    }
  }

  {
    // Routing forward with fractional weights: teacher, adaptions, weights and input.
    const Tensor w = gc::random_tensor({4, 3}, rng, 0.2, 0.8);
    std::vector<Tensor> in = gc::values_of(teacher);
    gc::append(in, gc::values_of(ad));
    in.push_back(w);
    in.push_back(x);
    const PolicyParams policy = make_policy(8, 4, 3, seed);
    s.fd("routing_forward",
         [&](Xs v) {
           std::size_t off = 0;
           RoutingNetwork rn{gc::with_values(teacher, v, off), student, {}, policy};
           rn.adaptions = gc::with_values(ad, v, off);
           return cross_entropy(routing_forward(rn, v[off + 1], v[off]), y);
         },
         in);
  }
}

// ---------------------------------------------------------------------------

inline void gradcheck_policy(GradcheckReport& report, std::uint64_t seed = 29) {
  gc::Suite s(report, "policy");
  using Xs = std::span<const Tensor>;
  Rng rng(seed, 3);
  const PolicyParams policy = make_policy(6, 4, 3, seed);
  const Tensor ft = gc::random_tensor({5, 6}, rng), fs = gc::random_tensor({5, 4}, rng);
  {
    std::vector<Tensor> in = gc::values_of(policy);
    in.push_back(ft);
    in.push_back(fs);
    s.fd("policy_logits",
         [&](Xs v) {
           std::size_t off = 0;
           const PolicyParams p = gc::with_values(policy, v, off);
           return gc::weighted_sum(policy_logits(p, v[off], v[off + 1]), seed);
         },
         in);
  }
  const Tensor logits = gc::random_tensor({5, 3, 2}, rng, -2.0, 2.0);
  const Tensor noise = sample_gumbel(logits.shape(), rng);
  for (double tau : {5.0, 1.0, 0.5}) {
    s.fd("gumbel_relaxed(tau=" + short_number(tau) + ")",
         [&](Xs v) { return gc::weighted_sum(teacher_channel(gumbel_relaxed(v[0], noise, tau)), seed); },
         {logits});
  }

  // Straight-through: the gradient through the decision value must equal the
  // gradient through the relaxed weights, bit for bit.
  for (double tau : {5.0, 0.5, 0.05}) {
    const Tensor c = gc::random_tensor({5, 3}, rng);
    Tape t1, t2;
    const Tensor l1 = t1.leaf(logits), l2 = t2.leaf(logits);
    const RoutingDecision d1 = straight_through(l1, noise, tau);
    const RoutingDecision d2 = straight_through(l2, noise, tau);
    const GradMap g1 = t1.backward(sum(mul(d1.value, c)));
    const GradMap g2 = t2.backward(sum(mul(d2.relaxed_w, c)));
    const Tensor* a = g1.find(l1);
    const Tensor* b = g2.find(l2);
    const bool same = a && b && a->same_values(*b) && d1.value.same_values(d1.forward_w);
    s.exact("straight_through identity(tau=" + short_number(tau) + ")", same, logits.size());
  }
}

// ---------------------------------------------------------------------------

namespace gc {

/// Checks one real train_step's L_s and L_routing gradients for a 2-block
/// pair against finite differences.
inline void end_to_end_case(Suite& s, DistillerKind kind, TeacherMode mode, std::uint64_t seed) {
  using Xs = std::span<const Tensor>;
  const NetworkSpec tspec = uniform_spec(5, 2, 8, 3);
  const NetworkSpec sspec = uniform_spec(5, 2, 4, 3);
  Rng rng(seed, 4);
  const Network teacher = jittered(build_network(tspec, seed + 100), seed + 100);
  const Tensor x = random_tensor({6, 5}, rng, -2.0, 2.0);
  const std::vector<std::size_t> y = {0, 1, 2, 2, 1, 0};

  TrainConfig cfg;
  cfg.distill = DistillConfig::defaults(kind, 2);
  cfg.distill.beta2 = kind == DistillerKind::kd_kl ? 0.0 : 1.0;
  cfg.strategy = Strategy::adaptive;
  cfg.teacher_mode = mode;
  cfg.seed = seed;
  TrainState st = make_train_state(teacher, sspec, cfg);
  st.rn.student = jittered(st.rn.student, seed + 200);
  st.rn.adaptions = jittered(st.rn.adaptions, seed + 300);
  const TrainState before = st;
  const double tau = 1.5;

  StepOptions opts;
  opts.keep_student_grads = true;
  opts.keep_routing_grads = true;
  const StepReport r = train_step(st, x, y, cfg, tau, opts);
  const bool cotrain = mode != TeacherMode::frozen;

  // The noise the step drew, replayed from the pre-step stream.
  Rng noise_rng = before.noise_rng;
  const Network t0 = detach_params(before.rn.teacher);
  const Network s0 = detach_params(before.rn.student);
  const FeatureBundle bt0 = forward_features(t0, x);
  const Tensor fs_last = forward_features(s0, x).block_features.back();
  const PolicyParams p0 = detach_params(before.rn.policy);
  const Tensor noise = sample_gumbel({6, 3, 2}, noise_rng);
  const Tensor relaxed0 = teacher_channel(gumbel_relaxed(
      policy_logits(p0, bt0.block_features.back(), fs_last), noise, tau));

  const std::string tag = std::string(to_string(kind)) + "," + std::string(to_string(mode));

  // L_s with the recorded gate held fixed.
  {
    std::vector<Tensor> in = values_of(before.rn.student);
    append(in, values_of(before.hints));
    std::vector<std::optional<Tensor>> analytic(r.student_grads.begin(),
                                                r.student_grads.begin() + static_cast<std::ptrdiff_t>(in.size()));
    s.against("L_s(" + tag + ")",
              [&](Xs v) {
                std::size_t off = 0;
                const Network net = with_values(before.rn.student, v, off);
                const HintProjections h = with_values(before.hints, v, off);
                return assemble_student_loss(forward_features(net, x), bt0, y, r.gate, cfg.distill, h)
                    .total;
              },
              in, analytic);
  }

  // L_routing through the straight-through surrogate w = hard + relaxed - relaxed0.
  {
    std::vector<Tensor> in = values_of(before.rn.policy);
    append(in, values_of(before.rn.adaptions));
    std::vector<std::optional<Tensor>> analytic = r.routing_grads;
    if (cotrain) {
      append(in, values_of(before.rn.teacher));
      const std::size_t first = r.student_grads.size() - values_of(before.rn.teacher).size();
      analytic.insert(analytic.end(), r.student_grads.begin() + static_cast<std::ptrdiff_t>(first),
                      r.student_grads.end());
    }
    s.against("L_routing(" + tag + ")",
              [&](Xs v) {
                std::size_t off = 0;
                const PolicyParams p = with_values(before.rn.policy, v, off);
                const AdaptionSet a = with_values(before.rn.adaptions, v, off);
                const Network t = cotrain ? with_values(t0, v, off) : t0;
                const Tensor relaxed = teacher_channel(gumbel_relaxed(
                    policy_logits(p, bt0.block_features.back(), fs_last), noise, tau));
                const Tensor w = add(r.forward_w, sub(relaxed, relaxed0));
                return scale(cross_entropy(reference_routing(t, s0, a, x, w), y), cfg.distill.beta3);
              },
              in, analytic);
  }
}

}  // namespace gc

inline void gradcheck_end_to_end(GradcheckReport& report, std::uint64_t seed = 31) {
  gc::Suite s(report, "end-to-end");
  for (DistillerKind kind : {DistillerKind::fitnets, DistillerKind::at, DistillerKind::sp}) {
    gc::end_to_end_case(s, kind, TeacherMode::frozen, seed);
  }
  gc::end_to_end_case(s, DistillerKind::fitnets, TeacherMode::pretrained, seed + 1);
}

inline const std::vector<std::string>& gradcheck_scopes() {
  static const std::vector<std::string> scopes = {"ops", "network", "policy", "end-to-end"};
  return scopes;
}

/// Runs one scope ("ops", "network", "policy", "end-to-end") or "all".
inline GradcheckReport run_gradcheck(const std::string& scope) {
  GradcheckReport report;
  const bool all = scope == "all";
  bool known = all;
  if (all || scope == "ops") { gradcheck_ops(report); known = true; }
  if (all || scope == "network") { gradcheck_network(report); known = true; }
  if (all || scope == "policy") { gradcheck_policy(report); known = true; }
  if (all || scope == "end-to-end") { gradcheck_end_to_end(report); known = true; }
  if (!known) {
    throw ConfigError("unknown gradcheck scope '" + scope +
                      "' (expected ops, network, policy, end-to-end or all)");
  }
  return report;
}

}  // namespace sakd::harness
