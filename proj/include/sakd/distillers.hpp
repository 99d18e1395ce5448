// SPDX-License-Identifier: Apache-2.0
//
// "What to distill" losses and the gated student objective.
//
// Per-sample distillers return one loss per sample so the routing gate d can
// weight them sample by sample. Batch-level distillers (SP) return a single
// scalar, which is scaled by the batch mean of the gate at its spot.

#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "sakd/errors.hpp"
#include "sakd/network.hpp"
#include "sakd/ops.hpp"
#include "sakd/random.hpp"
#include "sakd/tensor.hpp"

namespace sakd {

enum class DistillerKind { kd_kl, fitnets, at, sp };

inline std::string_view to_string(DistillerKind kind) {
  switch (kind) {
    case DistillerKind::kd_kl: return "kd";
    case DistillerKind::fitnets: return "fitnets";
    case DistillerKind::at: return "at";
    case DistillerKind::sp: return "sp";
  }
  return "?";
}

inline DistillerKind parse_distiller(std::string_view name) {
  if (name == "kd" || name == "kd_kl") return DistillerKind::kd_kl;
  if (name == "fitnets") return DistillerKind::fitnets;
  if (name == "at") return DistillerKind::at;
  if (name == "sp") return DistillerKind::sp;
  throw ConfigError("unknown distiller '" + std::string(name) + "' (expected kd, fitnets, at, sp)");
}

inline bool is_batch_level(DistillerKind kind) { return kind == DistillerKind::sp; }

struct SpotSet {
  std::vector<std::size_t> intermediate;  // 1-based block indices
  bool logit_spot_active = true;
  bool operator==(const SpotSet&) const = default;
};

/// Spot placement per distiller for an N-block pair. Placements that would
/// fall outside shallow networks are clamped into [1, N].
inline SpotSet default_spots(DistillerKind kind, std::size_t n) {
  SpotSet spots;
  switch (kind) {
    case DistillerKind::kd_kl: break;
    case DistillerKind::fitnets: spots.intermediate = {std::min<std::size_t>(3, n)}; break;
    case DistillerKind::at:
      for (std::size_t i = 2; i + 1 <= n; ++i) spots.intermediate.push_back(i);
      if (spots.intermediate.empty()) spots.intermediate = {n};
      break;
    case DistillerKind::sp: spots.intermediate = {n >= 2 ? n - 1 : 1}; break;
  }
  return spots;
}

inline double default_beta2(DistillerKind kind) {
  switch (kind) {
    case DistillerKind::kd_kl: return 0.0;
    case DistillerKind::fitnets: return 1.0;
    case DistillerKind::at: return 1000.0;
    case DistillerKind::sp: return 3000.0;
  }
  return 0.0;
}

struct DistillConfig {
  DistillerKind kind = DistillerKind::kd_kl;
  SpotSet spots;
  double beta1 = 1.0;
  double beta2 = 0.0;
  double beta3 = 1.0;
  double temperature = 4.0;
  double at_power = 2.0;
  bool kl_t2_scaling = true;

  static DistillConfig defaults(DistillerKind kind, std::size_t n) {
    DistillConfig cfg;
    cfg.kind = kind;
    cfg.spots = default_spots(kind, n);
    cfg.beta2 = default_beta2(kind);
    return cfg;
  }

  void validate(std::size_t n) const {
    if (!(beta1 >= 0.0 && beta2 >= 0.0 && beta3 >= 0.0)) {
      throw ConfigError("distill: loss factors must be >= 0");
    }
    if (!(temperature > 0.0)) throw ConfigError("distill: temperature must be > 0");
    if (!(at_power >= 1.0)) throw ConfigError("distill: at_power must be >= 1");
    for (std::size_t s : spots.intermediate) {
      if (s == 0 || s > n) {
        throw ConfigError("distill: spot " + std::to_string(s) + " outside {1.." +
                          std::to_string(n + 1) + "}; intermediate spots must be in 1.." +
                          std::to_string(n));
      }
    }
  }
};

// ---------------------------------------------------------------------------

/// FitNets regressors from student width to teacher width, one per hint spot
/// whose widths differ. Trained with the student.
struct HintProjections {
  std::vector<std::size_t> spots;
  std::vector<Affine> maps;

  const Affine* find(std::size_t spot) const {
    for (std::size_t i = 0; i < spots.size(); ++i) {
      if (spots[i] == spot) return &maps[i];
    }
    return nullptr;
  }
};

template <class H, class F>
  requires std::is_same_v<std::remove_const_t<H>, HintProjections>
void visit_params(H& hints, F&& f) {
  for (std::size_t i = 0; i < hints.spots.size(); ++i) {
    visit_params(hints.maps[i], "hint" + std::to_string(hints.spots[i]), f);
  }
}

inline HintProjections make_hints(const DistillConfig& cfg, const NetworkSpec& teacher,
                                  const NetworkSpec& student, std::uint64_t seed) {
  HintProjections hints;
  if (cfg.kind != DistillerKind::fitnets) return hints;
  Rng rng(seed, 0x68696e);
  for (std::size_t spot : cfg.spots.intermediate) {
    const std::size_t dt = teacher.block_width(spot - 1), ds = student.block_width(spot - 1);
    if (dt == ds) continue;
    hints.spots.push_back(spot);
    hints.maps.push_back(make_affine(ds, dt, rng, 3.0));
  }
  return hints;
}

// ---------------------------------------------------------------------------

/// Per-sample ||proj(f_s) - f_t||^2 / d_t. `proj` may be null only when the
/// widths already agree.
inline Tensor fitnets_hint(const Tensor& f_s, const Tensor& f_t, const Affine* proj) {
  Tensor student = f_s;
  if (proj) {
    student = apply(*proj, f_s);
  } else if (f_s.ndim() != 2 || f_s.shape() != f_t.shape()) {
    throw ConfigError("fitnets: widths " + to_string(f_s.shape()) + " vs " +
                      to_string(f_t.shape()) + " need a hint projection");
  }
  if (student.shape() != f_t.shape()) {
    throw ShapeError("fitnets: projected " + to_string(student.shape()) + " vs teacher " +
                     to_string(f_t.shape()));
  }
  const Tensor diff = sub(student, detach(f_t));
  return scale(row_sum(mul(diff, diff)), 1.0 / static_cast<double>(f_t.dim(1)));
}

namespace detail {

/// [from x to] matrix averaging consecutive groups of from/to features.
inline Tensor group_mean_matrix(std::size_t from, std::size_t to) {
  const std::size_t group = from / to;
  std::vector<double> m(from * to, 0.0);
  for (std::size_t i = 0; i < from; ++i) m[i * to + i / group] = 1.0 / static_cast<double>(group);
  return Tensor({from, to}, std::move(m));
}

}  // namespace detail

/// Attention vector of a dense feature: |f|^p normalized to unit L2 norm per
/// sample; all-zero features map to zero.
inline Tensor attention_map(const Tensor& f, double p) {
  return normalize_rows(abs_pow(f, p));
}

/// Per-sample ||a(f_s) - a(f_t)||^2. When widths differ and one divides the
/// other, the wider |f|^p is group-averaged down before normalizing.
inline Tensor attention_transfer(const Tensor& f_s, const Tensor& f_t, double p) {
  if (f_s.ndim() != 2 || f_t.ndim() != 2 || f_s.dim(0) != f_t.dim(0)) {
    throw ShapeError("attention_transfer: " + to_string(f_s.shape()) + " vs " +
                     to_string(f_t.shape()));
  }
  Tensor ps = abs_pow(f_s, p);
  Tensor pt = abs_pow(detach(f_t), p);
  const std::size_t ds = f_s.dim(1), dt = f_t.dim(1);
  if (ds != dt) {
    const std::size_t wide = std::max(ds, dt), narrow = std::min(ds, dt);
    if (wide % narrow != 0) {
      throw ConfigError("attention_transfer: widths " + std::to_string(ds) + " and " +
                        std::to_string(dt) + " are not multiples of each other");
    }
    const Tensor pool = detail::group_mean_matrix(wide, narrow);
    if (dt > ds) pt = matmul(pt, pool);
    else ps = matmul(ps, pool);
  }
  const Tensor diff = sub(normalize_rows(ps), normalize_rows(pt));
  return row_sum(mul(diff, diff));
}

/// Similarity-preserving loss ||G_s - G_t||_F^2 / B^2 with G the row-normalized
/// batch Gram matrix.
inline Tensor sp_loss(const Tensor& f_s, const Tensor& f_t) {
  if (f_s.ndim() != 2 || f_t.ndim() != 2 || f_s.dim(0) != f_t.dim(0)) {
    throw ShapeError("sp_loss: " + to_string(f_s.shape()) + " vs " + to_string(f_t.shape()));
  }
  const std::size_t b = f_s.dim(0);
  if (b < 2) throw ConfigError("sp_loss: needs a batch of at least 2 samples");
  const Tensor ft = detach(f_t);
  const Tensor gs = normalize_rows(matmul(f_s, transpose(f_s)));
  const Tensor gt = normalize_rows(matmul(ft, transpose(ft)));
  const Tensor diff = sub(gs, gt);
  return scale(sum(mul(diff, diff)), 1.0 / static_cast<double>(b * b));
}

// ---------------------------------------------------------------------------

struct StudentLoss {
  Tensor total;
  double ce = 0.0;
  double kl_term = 0.0;  // mean(kl * d[:, N+1])
  double kd_term = 0.0;  // sum over spots of gated intermediate losses
};

/// Cross-entropy plus gated KL and intermediate distillation terms. `d` is the
/// detached gate [B x (N+1)]; column i-1 gates spot i, the last column the
/// logit spot.
inline StudentLoss assemble_student_loss(const FeatureBundle& student, const FeatureBundle& teacher,
                                         std::span<const std::size_t> targets, const Tensor& d,
                                         const DistillConfig& cfg, const HintProjections& hints) {
  const std::size_t n = student.block_features.size();
  if (d.requires_grad()) throw UsageError("assemble_student_loss: gate must be detached");
  if (d.ndim() != 2 || d.dim(1) != n + 1 || d.dim(0) != targets.size()) {
    throw ShapeError("assemble_student_loss: gate " + to_string(d.shape()) + " for " +
                     std::to_string(targets.size()) + " samples and " + std::to_string(n + 1) +
                     " spots");
  }
  for (std::size_t s : cfg.spots.intermediate) {
    if (s == 0 || s > n) {
      throw ConfigError("assemble_student_loss: spot " + std::to_string(s) + " outside {1.." +
                        std::to_string(n + 1) + "}");
    }
  }

  StudentLoss out;
  const Tensor ce = cross_entropy(student.logits, targets);
  out.ce = ce.item();
  Tensor total = ce;

  if (cfg.spots.logit_spot_active) {
    const Tensor kl = kl_divergence(student.logits, teacher.logits, cfg.temperature,
                                    cfg.kl_t2_scaling);
    const Tensor kl_term = mean(mul(kl, column(d, n)));
    out.kl_term = kl_term.item();
    total = add(total, scale(kl_term, cfg.beta1));
  }

  std::optional<Tensor> kd_term;
  for (std::size_t spot : cfg.spots.intermediate) {
    const Tensor& fs = student.block_features[spot - 1];
    const Tensor& ft = teacher.block_features[spot - 1];
    const Tensor gate = column(d, spot - 1);
    Tensor term;
    switch (cfg.kind) {
      case DistillerKind::kd_kl: continue;
      case DistillerKind::fitnets: term = mean(mul(fitnets_hint(fs, ft, hints.find(spot)), gate)); break;
      case DistillerKind::at: term = mean(mul(attention_transfer(fs, ft, cfg.at_power), gate)); break;
      case DistillerKind::sp: term = scale(sp_loss(fs, ft), mean(gate).item()); break;
    }
    kd_term = kd_term ? add(*kd_term, term) : term;
  }
  if (kd_term) {
    out.kd_term = kd_term->item();
    total = add(total, scale(*kd_term, cfg.beta2));
  }
  out.total = total;
  return out;
}

}  // namespace sakd
