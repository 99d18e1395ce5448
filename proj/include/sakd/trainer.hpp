// SPDX-License-Identifier: Apache-2.0
//
// Spot-adaptive distillation training loop.
//
// Each step records one tape and runs two backward passes over it:
//   L_s       = CE + beta1 * gated KL + beta2 * gated intermediate losses
//               -> student group (student, hint projections[, teacher])
//   L_routing = beta3 * CE(routing logits)
//               -> routing group (policy, adaption maps)
// The gate d is the detached routing decision, so L_s never reaches the
// routing group, and the routing pass treats student weights as constants, so
// L_routing never reaches the student. Both passes see the pre-update
// parameters; the two updates touch disjoint parameter sets.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "sakd/data.hpp"
#include "sakd/distillers.hpp"
#include "sakd/errors.hpp"
#include "sakd/network.hpp"
#include "sakd/ops.hpp"
#include "sakd/optim.hpp"
#include "sakd/policy.hpp"
#include "sakd/random.hpp"
#include "sakd/routing.hpp"
#include "sakd/tensor.hpp"

namespace sakd {

enum class Strategy { adaptive, always, anti, rand, none };

/// Comparison-table order.
inline constexpr Strategy kAllStrategies[] = {Strategy::adaptive, Strategy::always,
                                              Strategy::anti, Strategy::rand, Strategy::none};

inline std::string_view to_string(Strategy s) {
  switch (s) {
    case Strategy::adaptive: return "adaptive";
    case Strategy::always: return "always";
    case Strategy::anti: return "anti";
    case Strategy::rand: return "rand";
    case Strategy::none: return "none";
  }
  return "?";
}

inline Strategy parse_strategy(std::string_view name) {
  for (Strategy s : kAllStrategies) {
    if (to_string(s) == name) return s;
  }
  throw ConfigError("unknown strategy '" + std::string(name) +
                    "' (expected adaptive, always, anti, rand, none)");
}

/// Strategies whose gate follows the live policy, so the routing machinery
/// keeps training.
inline bool uses_policy(Strategy s) { return s == Strategy::adaptive || s == Strategy::anti; }

enum class TeacherMode { frozen, scratch, pretrained };

inline std::string_view to_string(TeacherMode m) {
  switch (m) {
    case TeacherMode::frozen: return "frozen";
    case TeacherMode::scratch: return "scratch";
    case TeacherMode::pretrained: return "pretrained";
  }
  return "?";
}

inline TeacherMode parse_teacher_mode(std::string_view name) {
  if (name == "frozen") return TeacherMode::frozen;
  if (name == "scratch") return TeacherMode::scratch;
  if (name == "pretrained") return TeacherMode::pretrained;
  throw ConfigError("unknown teacher mode '" + std::string(name) +
                    "' (expected frozen, scratch, pretrained)");
}

/// Gate d [B x S] applied to the student loss.
inline Tensor apply_strategy(Strategy strategy, const RoutingDecision* decision, std::size_t batch,
                             std::size_t spots, Rng& rng) {
  switch (strategy) {
    case Strategy::adaptive:
    case Strategy::anti: {
      if (!decision) throw UsageError("apply_strategy: adaptive/anti need a routing decision");
      const Tensor fw = detach(decision->forward_w);
      if (strategy == Strategy::adaptive) return fw;
      std::vector<double> out(fw.size());
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = 1.0 - fw[i];
      return Tensor(fw.shape(), std::move(out));
    }
    case Strategy::always: return Tensor::full({batch, spots}, 1.0);
    case Strategy::none: return Tensor::zeros({batch, spots});
    case Strategy::rand: {
      std::vector<double> out(batch * spots);
      for (double& v : out) v = rng.bernoulli(0.5) ? 1.0 : 0.0;
      return Tensor({batch, spots}, std::move(out));
    }
  }
  throw UsageError("apply_strategy: unknown strategy");
}

/// Per spot, the fraction of samples routed to the teacher.
inline std::vector<double> distill_probability(std::span<const Tensor> decisions) {
  if (decisions.empty()) throw UsageError("distill_probability: no decisions recorded");
  const std::size_t spots = decisions.front().dim(1);
  std::vector<double> counts(spots, 0.0);
  std::size_t samples = 0;
  for (const Tensor& w : decisions) {
    if (w.ndim() != 2 || w.dim(1) != spots) throw ShapeError("distill_probability: ragged log");
    for (std::size_t r = 0; r < w.dim(0); ++r) {
      for (std::size_t s = 0; s < spots; ++s) counts[s] += w.at(r, s);
    }
    samples += w.dim(0);
  }
  for (double& c : counts) c /= static_cast<double>(samples);
  return counts;
}

// ---------------------------------------------------------------------------

struct TrainConfig {
  DistillConfig distill;
  Strategy strategy = Strategy::adaptive;
  TauSchedule tau;
  SgdConfig sgd;
  std::size_t epochs = 60;
  std::size_t batch_size = 32;
  TeacherMode teacher_mode = TeacherMode::frozen;
  std::uint64_t seed = 0;
};

struct TrainState {
  RoutingNetwork rn;
  HintProjections hints;
  SgdState student_opt;
  SgdState routing_opt;
  Rng shuffle_rng;
  Rng noise_rng;
  Rng gate_rng;
  TeacherMode teacher_mode = TeacherMode::frozen;

  /// Student, hint projections and (co-training only) teacher parameters.
  std::vector<Tensor*> student_group() {
    std::vector<Tensor*> refs = param_refs(rn.student);
    for (Tensor* t : param_refs(hints)) refs.push_back(t);
    if (teacher_mode != TeacherMode::frozen) {
      for (Tensor* t : param_refs(rn.teacher)) refs.push_back(t);
    }
    return refs;
  }

  /// Policy and adaption parameters.
  std::vector<Tensor*> routing_group() {
    std::vector<Tensor*> refs = param_refs(rn.policy);
    for (Tensor* t : param_refs(rn.adaptions)) refs.push_back(t);
    return refs;
  }
};

/// Derived seeds so each component's initialization is independent.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t salt) {
  return Rng(seed, salt).next();
}

/// Fresh state: student, adaptions, policy and hints initialized from
/// cfg.seed. A frozen teacher is frozen here; co-trained teachers stay live.
inline TrainState make_train_state(const Network& teacher, const NetworkSpec& student_spec,
                                   const TrainConfig& cfg) {
  const std::uint64_t seed = cfg.seed;
  TrainState st;
  st.teacher_mode = cfg.teacher_mode;
  st.rn.teacher = cfg.teacher_mode == TeacherMode::frozen ? freeze(teacher) : detach_params(teacher);
  if (cfg.teacher_mode != TeacherMode::frozen) st.rn.teacher.frozen = false;
  st.rn.student = build_network(student_spec, derive_seed(seed, 1));
  st.rn.adaptions = make_adaptions(teacher.spec, student_spec, derive_seed(seed, 2));
  const std::size_t n = teacher.spec.block_count();
  st.rn.policy = make_policy(teacher.spec.block_width(n - 1), student_spec.block_width(n - 1),
                             n + 1, derive_seed(seed, 3));
  st.rn.validate();
  cfg.distill.validate(n);
  cfg.tau.validate();
  st.hints = make_hints(cfg.distill, teacher.spec, student_spec, derive_seed(seed, 4));
  st.student_opt = make_sgd(cfg.sgd, st.student_group());
  st.routing_opt = make_sgd(cfg.sgd, st.routing_group());
  st.shuffle_rng = Rng(seed, 11);
  st.noise_rng = Rng(seed, 12);
  st.gate_rng = Rng(seed, 13);
  return st;
}

struct StepOptions {
  bool audit = false;               // run both backward passes and record leakage checks
  bool keep_student_grads = false;
  bool keep_routing_grads = false;
  bool routing_backward = true;     // false: never run the routing backward pass
};

struct StepReport {
  double ce = 0.0;
  double kl = 0.0;             // gated KL term (before beta1)
  double kd = 0.0;             // gated intermediate term (before beta2)
  double routing = 0.0;        // routing cross-entropy (before beta3)
  double student_total = 0.0;  // L_s as recorded on the tape
  double routing_total = 0.0;  // L_routing as recorded on the tape
  double total = 0.0;          // L_s + L_routing
  Tensor forward_w;            // raw policy decision [B x S]
  Tensor gate;                 // applied gate d [B x S]
  bool routing_updated = false;
  // Audit results (valid when StepOptions::audit).
  bool routing_grad_reaches_student = false;
  bool student_grad_reaches_routing = false;
  bool student_grad_reaches_teacher = false;
  std::vector<std::optional<Tensor>> student_grads;  // student_group() order
  std::vector<std::optional<Tensor>> routing_grads;  // routing_group() order
};

namespace detail {

inline void require_finite_term(double v, const char* term) {
  if (!std::isfinite(v)) {
    throw NumericError(std::string("non-finite ") + term + " loss; lower the learning rate or " +
                       "the loss factor for this term");
  }
}

template <class M>
bool any_grad(const GradMap& grads, const M& bound) {
  bool hit = false;
  visit_params(bound, [&](const std::string&, const Tensor& t) { hit = hit || grads.contains(t); });
  return hit;
}

}  // namespace detail

/// One training step on batch (x, y). `teacher_cache`, when given, must be the
/// frozen teacher's bundle for exactly these rows.
inline StepReport train_step(TrainState& st, const Tensor& x, std::span<const std::size_t> y,
                             const TrainConfig& cfg, double tau, const StepOptions& opts = {},
                             const FeatureBundle* teacher_cache = nullptr) {
  const std::size_t n = st.rn.blocks();
  const std::size_t batch = x.dim(0);
  const bool cotrain = st.teacher_mode != TeacherMode::frozen;

  Tape tape;
  // Teacher forward without gradient.
  const FeatureBundle bundle_t = teacher_cache && !cotrain
                                     ? *teacher_cache
                                     : forward_features(detach_params(st.rn.teacher), x);

  RoutingNetwork bound;
  bound.student = bind(tape, st.rn.student);
  bound.teacher = cotrain ? bind_params(tape, st.rn.teacher) : st.rn.teacher;
  bound.policy = bind_params(tape, st.rn.policy);
  bound.adaptions = bind_params(tape, st.rn.adaptions);
  const HintProjections hints = bind_params(tape, st.hints);

  const FeatureBundle bundle_s = forward_features(bound.student, x);

  const Tensor logits = policy_logits(bound.policy, bundle_t.block_features.back(),
                                      detach(bundle_s.block_features.back()));
  const Tensor noise = sample_gumbel(logits.shape(), st.noise_rng);
  const RoutingDecision decision = straight_through(logits, noise, tau);
  const Tensor d = apply_strategy(cfg.strategy, &decision, batch, n + 1, st.gate_rng);

  const StudentLoss sl = assemble_student_loss(bundle_s, bundle_t, y, d, cfg.distill, hints);
  detail::require_finite_term(sl.ce, "cross-entropy");
  detail::require_finite_term(sl.kl_term, "KL");
  detail::require_finite_term(sl.kd_term, "distillation");

  const Tensor routing_logits = routing_forward(bound, x, decision);
  const Tensor routing_ce = cross_entropy(routing_logits, y);
  const Tensor routing = scale(routing_ce, cfg.distill.beta3);
  detail::require_finite_term(routing_ce.item(), "routing");

  StepReport report;
  report.ce = sl.ce;
  report.kl = sl.kl_term;
  report.kd = sl.kd_term;
  report.routing = routing_ce.item();
  report.student_total = sl.total.item();
  report.routing_total = routing.item();
  report.total = report.student_total + report.routing_total;
  report.forward_w = decision.forward_w;
  report.gate = d;

  const bool update_routing =
      opts.routing_backward && uses_policy(cfg.strategy) && cfg.distill.beta3 > 0.0;
  const bool need_routing_grads =
      opts.routing_backward &&
      (update_routing || cotrain || opts.audit || opts.keep_routing_grads) &&
      routing.requires_grad();

  const GradMap student_grads = sl.total.requires_grad() ? tape.backward(sl.total) : GradMap{};
  const GradMap routing_grads = need_routing_grads ? tape.backward(routing) : GradMap{};

  if (opts.audit) {
    report.routing_grad_reaches_student =
        detail::any_grad(routing_grads, bound.student) || detail::any_grad(routing_grads, hints);
    report.student_grad_reaches_routing = detail::any_grad(student_grads, bound.policy) ||
                                          detail::any_grad(student_grads, bound.adaptions);
    report.student_grad_reaches_teacher = cotrain && detail::any_grad(student_grads, bound.teacher);
  }

  // Student group: L_s gradients for student and hints; a co-trained teacher
  // takes its gradient from the routing pass.
  std::vector<std::optional<Tensor>> sgrads = student_grads.gather(param_list(bound.student));
  for (auto& g : student_grads.gather(param_list(hints))) sgrads.push_back(std::move(g));
  if (cotrain) {
    for (auto& g : routing_grads.gather(param_list(bound.teacher))) sgrads.push_back(std::move(g));
  }
  if (opts.keep_student_grads) report.student_grads = sgrads;

  std::vector<std::optional<Tensor>> rgrads;
  if (update_routing || opts.keep_routing_grads) {
    rgrads = routing_grads.gather(param_list(bound.policy));
    for (auto& g : routing_grads.gather(param_list(bound.adaptions))) rgrads.push_back(std::move(g));
  }

  if (opts.keep_routing_grads) report.routing_grads = rgrads;

  sgd_step(st.student_group(), sgrads, st.student_opt);
  if (update_routing) {
    sgd_step(st.routing_group(), rgrads, st.routing_opt);
    report.routing_updated = true;
  }
  return report;
}

// ---------------------------------------------------------------------------

struct SplitStats {
  double ce = 0.0;
  double kl = 0.0;
  double kd = 0.0;
  double routing = 0.0;
  double total = 0.0;
  double accuracy = 0.0;
  std::vector<double> p_spot;     // raw policy teacher-rate per spot
  std::vector<double> gate_rate;  // applied gate rate per spot (train only)
};

struct EpochStats {
  std::size_t epoch = 0;
  double tau = 0.0;
  double lr = 0.0;
  SplitStats train;
  SplitStats test;
};

inline double accuracy(const Tensor& logits, std::span<const std::size_t> y) {
  if (y.empty()) return 0.0;
  const std::size_t cols = logits.dim(1);
  std::size_t hits = 0;
  for (std::size_t r = 0; r < y.size(); ++r) {
    const double* row = logits.data() + r * cols;
    const auto best = static_cast<std::size_t>(std::max_element(row, row + cols) - row);
    hits += best == y[r];
  }
  return static_cast<double>(hits) / static_cast<double>(y.size());
}

inline double evaluate_accuracy(const Network& net, const LabeledSplit& split) {
  return accuracy(forward_features(detach_params(net), split.x).logits, split.y);
}

/// Evaluation view of a split: ungated losses, noise-free policy decisions
/// and the routing loss under those decisions.
inline SplitStats evaluate_split(const TrainState& st, const LabeledSplit& split,
                                 const TrainConfig& cfg, const FeatureBundle* teacher_cache) {
  const Network teacher = detach_params(st.rn.teacher);
  const FeatureBundle bt = teacher_cache ? *teacher_cache : forward_features(teacher, split.x);
  const FeatureBundle bs = forward_features(detach_params(st.rn.student), split.x);
  const std::size_t n = st.rn.blocks();

  SplitStats out;
  const Tensor ones = Tensor::full({split.size(), n + 1}, 1.0);
  const StudentLoss sl = assemble_student_loss(bs, bt, split.y, ones, cfg.distill,
                                               detach_params(st.hints));
  out.ce = sl.ce;
  out.kl = sl.kl_term;
  out.kd = sl.kd_term;
  out.accuracy = accuracy(bs.logits, split.y);

  const RoutingNetwork view{teacher, st.rn.student, detach_params(st.rn.adaptions),
                            detach_params(st.rn.policy)};
  const Tensor logits =
      policy_logits(view.policy, bt.block_features.back(), bs.block_features.back());
  const Tensor w = teacher_channel(gumbel_forward(logits, Tensor::zeros(logits.shape())));
  out.routing = cross_entropy(routing_forward(view, split.x, w), split.y).item();
  out.total = out.ce + cfg.distill.beta1 * out.kl + cfg.distill.beta2 * out.kd +
              cfg.distill.beta3 * out.routing;
  out.p_spot = distill_probability(std::span<const Tensor>(&w, 1));
  return out;
}

inline FeatureBundle select_bundle_rows(const FeatureBundle& b, std::span<const std::size_t> rows) {
  FeatureBundle out;
  for (const Tensor& f : b.block_features) out.block_features.push_back(select_rows(f, rows));
  out.logits = select_rows(b.logits, rows);
  return out;
}

/// Shuffled batches of `batch_size`; a trailing single sample joins the
/// previous batch so batch-level losses always see >= 2 samples.
inline std::vector<std::vector<std::size_t>> make_batches(std::size_t n, std::size_t batch_size,
                                                         Rng& rng) {
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng.engine());
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t i = 0; i < n; i += batch_size) {
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                         order.begin() + static_cast<std::ptrdiff_t>(std::min(n, i + batch_size)));
  }
  if (batches.size() > 1 && batches.back().size() == 1) {
    batches[batches.size() - 2].push_back(batches.back().front());
    batches.pop_back();
  }
  return batches;
}

struct TrainHooks {
  std::function<void(const TrainState&, const StepReport&)> on_step;
  std::function<void(const EpochStats&)> on_epoch;
  StepOptions step_options;
};

/// Runs cfg.epochs epochs; the trained student is left in `st`.
inline std::vector<EpochStats> train(TrainState& st, const Dataset& data, const TrainConfig& cfg,
                                     const TrainHooks& hooks = {}) {
  std::vector<EpochStats> history;
  if (cfg.epochs == 0) return history;
  if (data.train.size() < 2) throw ConfigError("train: need at least 2 training samples");
  const std::size_t spots = st.rn.spots();
  const bool cotrain = st.teacher_mode != TeacherMode::frozen;

  // A frozen teacher's features never change.
  std::optional<FeatureBundle> train_cache, test_cache;
  if (!cotrain) {
    const Network teacher = detach_params(st.rn.teacher);
    train_cache = forward_features(teacher, data.train.x);
    if (data.test.size()) test_cache = forward_features(teacher, data.test.x);
  }

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    EpochStats es;
    es.epoch = epoch;
    es.tau = tau_at(cfg.tau, epoch);
    es.lr = lr_at(cfg.sgd, epoch);
    st.student_opt.lr = es.lr;
    st.routing_opt.lr = es.lr;

    std::vector<double> p(spots, 0.0), g(spots, 0.0);
    double ce = 0, kl = 0, kd = 0, routing = 0, total = 0;
    std::size_t seen = 0;
    for (const auto& rows : make_batches(data.train.size(), cfg.batch_size, st.shuffle_rng)) {
      const Tensor x = select_rows(data.train.x, rows);
      const std::vector<std::size_t> y = select<std::size_t>(data.train.y, rows);
      std::optional<FeatureBundle> tb;
      if (train_cache) tb = select_bundle_rows(*train_cache, rows);
      const StepReport r =
          train_step(st, x, y, cfg, es.tau, hooks.step_options, tb ? &*tb : nullptr);
      if (hooks.on_step) hooks.on_step(st, r);

      const double b = static_cast<double>(rows.size());
      ce += r.ce * b;
      kl += r.kl * b;
      kd += r.kd * b;
      routing += r.routing * b;
      total += r.total * b;
      for (std::size_t i = 0; i < rows.size(); ++i) {
        for (std::size_t s = 0; s < spots; ++s) {
          p[s] += r.forward_w.at(i, s);
          g[s] += r.gate.at(i, s);
        }
      }
      seen += rows.size();
    }
    const double inv = 1.0 / static_cast<double>(seen);
    es.train.ce = ce * inv;
    es.train.kl = kl * inv;
    es.train.kd = kd * inv;
    es.train.routing = routing * inv;
    es.train.total = total * inv;
    for (std::size_t s = 0; s < spots; ++s) {
      p[s] *= inv;
      g[s] *= inv;
    }
    es.train.p_spot = std::move(p);
    es.train.gate_rate = std::move(g);
    es.train.accuracy = evaluate_accuracy(st.rn.student, data.train);
    if (data.test.size()) {
      es.test = evaluate_split(st, data.test, cfg, test_cache ? &*test_cache : nullptr);
    }
    if (hooks.on_epoch) hooks.on_epoch(es);
    history.push_back(std::move(es));
  }
  return history;
}

}  // namespace sakd
