// SPDX-License-Identifier: Apache-2.0
//
// Differentiable operator set. Every op validates shapes, computes the forward
// value eagerly and registers a backward closure through Tape::record. The
// closures capture only immutable storage, so replaying backward is
// deterministic.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "sakd/errors.hpp"
#include "sakd/tensor.hpp"

namespace sakd {

namespace detail {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMatrix>;
using MutMap = Eigen::Map<RowMatrix>;

inline void require_2d(const Tensor& t, const char* op) {
  if (t.ndim() != 2) {
    throw ShapeError(std::string(op) + ": expected a matrix, got shape " + to_string(t.shape()));
  }
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                     to_string(b.shape()));
  }
}

inline void require_finite(const Tensor& t, const char* op) {
  for (double v : t.values()) {
    if (!std::isfinite(v)) throw NumericError(std::string(op) + ": non-finite input");
  }
}

// Row-wise log-softmax of a rows x cols block, max-subtracted.
inline void log_softmax_rows(const double* x, double* out, std::size_t rows, std::size_t cols) {
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x + r * cols;
    double* yr = out + r * cols;
    const double mx = *std::max_element(xr, xr + cols);
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) z += std::exp(xr[c] - mx);
    const double lz = mx + std::log(z);
    for (std::size_t c = 0; c < cols; ++c) yr[c] = xr[c] - lz;
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_2d(a, "matmul");
  detail::require_2d(b, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul: inner dimensions disagree, " + to_string(a.shape()) + " x " +
                     to_string(b.shape()));
  }
  std::vector<double> out(m * n);
  detail::MutMap(out.data(), m, n).noalias() =
      detail::ConstMap(a.data(), m, k) * detail::ConstMap(b.data(), k, n);

  Tensor av = a.detached(), bv = b.detached();
  return Tape::record(OpKind::matmul, {&a, &b}, {m, n}, std::move(out),
                      [av, bv, m, k, n](std::span<const double> g, GradSink& sink) {
                        detail::ConstMap G(g.data(), m, n);
                        if (sink.wants(0)) {
                          detail::MutMap(sink[0].data(), m, k).noalias() +=
                              G * detail::ConstMap(bv.data(), k, n).transpose();
                        }
                        if (sink.wants(1)) {
                          detail::MutMap(sink[1].data(), k, n).noalias() +=
                              detail::ConstMap(av.data(), m, k).transpose() * G;
                        }
                      });
}

inline Tensor transpose(const Tensor& a) {
  detail::require_2d(a, "transpose");
  const std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<double> out(m * n);
  detail::MutMap(out.data(), n, m) = detail::ConstMap(a.data(), m, n).transpose();
  return Tape::record(OpKind::transpose, {&a}, {n, m}, std::move(out),
                      [m, n](std::span<const double> g, GradSink& sink) {
                        detail::MutMap(sink[0].data(), m, n) +=
                            detail::ConstMap(g.data(), n, m).transpose();
                      });
}

// ---------------------------------------------------------------------------
// Elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return Tape::record(OpKind::add, {&a, &b}, a.shape(), std::move(out),
                      [](std::span<const double> g, GradSink& sink) {
                        for (std::size_t k = 0; k < 2; ++k) {
                          if (!sink.wants(k)) continue;
                          auto dst = sink[k];
                          for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
                        }
                      });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return Tape::record(OpKind::sub, {&a, &b}, a.shape(), std::move(out),
                      [](std::span<const double> g, GradSink& sink) {
                        if (sink.wants(0)) {
                          auto dst = sink[0];
                          for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
                        }
                        if (sink.wants(1)) {
                          auto dst = sink[1];
                          for (std::size_t i = 0; i < g.size(); ++i) dst[i] -= g[i];
                        }
                      });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  Tensor av = a.detached(), bv = b.detached();
  return Tape::record(OpKind::mul, {&a, &b}, a.shape(), std::move(out),
                      [av, bv](std::span<const double> g, GradSink& sink) {
                        if (sink.wants(0)) {
                          auto dst = sink[0];
                          for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i] * bv[i];
                        }
                        if (sink.wants(1)) {
                          auto dst = sink[1];
                          for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i] * av[i];
                        }
                      });
}

inline Tensor scale(const Tensor& a, double s) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * s;
  return Tape::record(OpKind::scale, {&a}, a.shape(), std::move(out),
                      [s](std::span<const double> g, GradSink& sink) {
                        auto dst = sink[0];
                        for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i] * s;
                      });
}

inline Tensor add(const Tensor& a, double s) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + s;
  return Tape::record(OpKind::add_scalar, {&a}, a.shape(), std::move(out),
                      [](std::span<const double> g, GradSink& sink) {
                        auto dst = sink[0];
                        for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
                      });
}

inline Tensor relu(const Tensor& a) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] > 0.0 ? a[i] : 0.0;
  Tensor av = a.detached();
  return Tape::record(OpKind::relu, {&a}, a.shape(), std::move(out),
                      [av](std::span<const double> g, GradSink& sink) {
                        auto dst = sink[0];
                        for (std::size_t i = 0; i < g.size(); ++i) {
                          if (av[i] > 0.0) dst[i] += g[i];
                        }
                      });
}

/// |a|^p elementwise, p >= 1.
inline Tensor abs_pow(const Tensor& a, double p) {
  if (!(p >= 1.0)) throw ConfigError("abs_pow: exponent must be >= 1, got " + std::to_string(p));
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::pow(std::abs(a[i]), p);
  Tensor av = a.detached();
  return Tape::record(OpKind::abs_pow, {&a}, a.shape(), std::move(out),
                      [av, p](std::span<const double> g, GradSink& sink) {
                        auto dst = sink[0];
                        for (std::size_t i = 0; i < g.size(); ++i) {
                          const double x = av[i];
                          if (x == 0.0) continue;
                          const double mag = p == 2.0 ? 2.0 * std::abs(x)
                                                      : p * std::pow(std::abs(x), p - 1.0);
                          dst[i] += g[i] * (x > 0.0 ? mag : -mag);
                        }
                      });
}

// ---------------------------------------------------------------------------
// Broadcasting helpers

/// x [B x d] + bias [d] broadcast over rows.
inline Tensor add_row_bias(const Tensor& x, const Tensor& bias) {
  detail::require_2d(x, "add_row_bias");
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  if (bias.size() != cols) {
    throw ShapeError("add_row_bias: bias " + to_string(bias.shape()) + " vs input " +
                     to_string(x.shape()));
  }
  std::vector<double> out(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = x[r * cols + c] + bias[c];
  }
  return Tape::record(OpKind::add_row_bias, {&x, &bias}, x.shape(), std::move(out),
                      [rows, cols](std::span<const double> g, GradSink& sink) {
                        if (sink.wants(0)) {
                          auto dst = sink[0];
                          for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
                        }
                        if (sink.wants(1)) {
                          auto dst = sink[1];
                          for (std::size_t r = 0; r < rows; ++r) {
                            for (std::size_t c = 0; c < cols; ++c) dst[c] += g[r * cols + c];
                          }
                        }
                      });
}

/// x [B x d] with row b multiplied by w[b].
inline Tensor scale_rows(const Tensor& x, const Tensor& w) {
  detail::require_2d(x, "scale_rows");
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  if (w.size() != rows) {
    throw ShapeError("scale_rows: weights " + to_string(w.shape()) + " vs input " +
                     to_string(x.shape()));
  }
  std::vector<double> out(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = x[r * cols + c] * w[r];
  }
  Tensor xv = x.detached(), wv = w.detached();
  return Tape::record(OpKind::scale_rows, {&x, &w}, x.shape(), std::move(out),
                      [xv, wv, rows, cols](std::span<const double> g, GradSink& sink) {
                        if (sink.wants(0)) {
                          auto dst = sink[0];
                          for (std::size_t r = 0; r < rows; ++r) {
                            for (std::size_t c = 0; c < cols; ++c) {
                              dst[r * cols + c] += g[r * cols + c] * wv[r];
                            }
                          }
                        }
                        if (sink.wants(1)) {
                          auto dst = sink[1];
                          for (std::size_t r = 0; r < rows; ++r) {
                            double acc = 0.0;
                            for (std::size_t c = 0; c < cols; ++c) {
                              acc += g[r * cols + c] * xv[r * cols + c];
                            }
                            dst[r] += acc;
                          }
                        }
                      });
}

// ---------------------------------------------------------------------------
// Structural

inline Tensor concat(const Tensor& a, const Tensor& b) {
  detail::require_2d(a, "concat");
  detail::require_2d(b, "concat");
  if (a.dim(0) != b.dim(0)) {
    throw ShapeError("concat: batch sizes differ, " + to_string(a.shape()) + " vs " +
                     to_string(b.shape()));
  }
  const std::size_t rows = a.dim(0), p = a.dim(1), q = b.dim(1), w = p + q;
  std::vector<double> out(rows * w);
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(a.data() + r * p, p, out.data() + r * w);
    std::copy_n(b.data() + r * q, q, out.data() + r * w + p);
  }
  return Tape::record(OpKind::concat, {&a, &b}, {rows, w}, std::move(out),
                      [rows, p, q, w](std::span<const double> g, GradSink& sink) {
                        if (sink.wants(0)) {
                          auto dst = sink[0];
                          for (std::size_t r = 0; r < rows; ++r) {
                            for (std::size_t c = 0; c < p; ++c) dst[r * p + c] += g[r * w + c];
                          }
                        }
                        if (sink.wants(1)) {
                          auto dst = sink[1];
                          for (std::size_t r = 0; r < rows; ++r) {
                            for (std::size_t c = 0; c < q; ++c) {
                              dst[r * q + c] += g[r * w + p + c];
                            }
                          }
                        }
                      });
}

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (numel(shape) != a.size()) {
    throw ShapeError("reshape: cannot view " + to_string(a.shape()) + " as " + to_string(shape));
  }
  std::vector<double> out(a.values().begin(), a.values().end());
  return Tape::record(OpKind::reshape, {&a}, std::move(shape), std::move(out),
                      [](std::span<const double> g, GradSink& sink) {
                        auto dst = sink[0];
                        for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
                      });
}

/// Selected columns of x [B x C], in the given order.
inline Tensor gather_cols(const Tensor& x, std::vector<std::size_t> cols) {
  detail::require_2d(x, "gather_cols");
  const std::size_t rows = x.dim(0), width = x.dim(1), k = cols.size();
  for (std::size_t c : cols) {
    if (c >= width) {
      throw IndexError("gather_cols: column " + std::to_string(c) + " out of range for " +
                       to_string(x.shape()));
    }
  }
  std::vector<double> out(rows * k);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < k; ++j) out[r * k + j] = x[r * width + cols[j]];
  }
  return Tape::record(OpKind::gather_cols, {&x}, {rows, k}, std::move(out),
                      [rows, width, k, cols = std::move(cols)](std::span<const double> g,
                                                               GradSink& sink) {
                        auto dst = sink[0];
                        for (std::size_t r = 0; r < rows; ++r) {
                          for (std::size_t j = 0; j < k; ++j) {
                            dst[r * width + cols[j]] += g[r * k + j];
                          }
                        }
                      });
}

/// Column j of x [B x C] as a vector [B].
inline Tensor column(const Tensor& x, std::size_t j) {
  return reshape(gather_cols(x, {j}), {x.dim(0)});
}

// ---------------------------------------------------------------------------
// Softmax family and losses

inline Tensor softmax(const Tensor& x) {
  detail::require_2d(x, "softmax");
  detail::require_finite(x, "softmax");
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  if (cols == 0) throw ShapeError("softmax: needs at least one class");
  std::vector<double> out(x.size());
  detail::log_softmax_rows(x.data(), out.data(), rows, cols);
  for (double& v : out) v = std::exp(v);
  Tensor y(x.shape(), out);
  return Tape::record(OpKind::softmax, {&x}, x.shape(), std::move(out),
                      [y, rows, cols](std::span<const double> g, GradSink& sink) {
                        auto dst = sink[0];
                        for (std::size_t r = 0; r < rows; ++r) {
                          double dot = 0.0;
                          for (std::size_t c = 0; c < cols; ++c) {
                            dot += g[r * cols + c] * y[r * cols + c];
                          }
                          for (std::size_t c = 0; c < cols; ++c) {
                            const std::size_t i = r * cols + c;
                            dst[i] += y[i] * (g[i] - dot);
                          }
                        }
                      });
}

inline Tensor log_softmax(const Tensor& x) {
  detail::require_2d(x, "log_softmax");
  detail::require_finite(x, "log_softmax");
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  if (cols == 0) throw ShapeError("log_softmax: needs at least one class");
  std::vector<double> out(x.size());
  detail::log_softmax_rows(x.data(), out.data(), rows, cols);
  Tensor y(x.shape(), out);
  return Tape::record(OpKind::log_softmax, {&x}, x.shape(), std::move(out),
                      [y, rows, cols](std::span<const double> g, GradSink& sink) {
                        auto dst = sink[0];
                        for (std::size_t r = 0; r < rows; ++r) {
                          double total = 0.0;
                          for (std::size_t c = 0; c < cols; ++c) total += g[r * cols + c];
                          for (std::size_t c = 0; c < cols; ++c) {
                            const std::size_t i = r * cols + c;
                            dst[i] += g[i] - std::exp(y[i]) * total;
                          }
                        }
                      });
}

/// Batch-mean negative log-likelihood of `targets` under softmax(logits).
inline Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> targets) {
  detail::require_2d(logits, "cross_entropy");
  detail::require_finite(logits, "cross_entropy");
  const std::size_t rows = logits.dim(0), cols = logits.dim(1);
  if (targets.size() != rows) {
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                     std::to_string(rows) + " rows");
  }
  if (rows == 0) throw ShapeError("cross_entropy: empty batch");
  for (std::size_t t : targets) {
    if (t >= cols) {
      throw IndexError("cross_entropy: target " + std::to_string(t) + " outside [0, " +
                       std::to_string(cols) + ")");
    }
  }
  std::vector<double> logp(logits.size());
  detail::log_softmax_rows(logits.data(), logp.data(), rows, cols);
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) total -= logp[r * cols + targets[r]];
  const double value = total / static_cast<double>(rows);

  std::vector<std::size_t> tgt(targets.begin(), targets.end());
  return Tape::record(
      OpKind::cross_entropy, {&logits}, {}, {value},
      [logp = std::move(logp), tgt = std::move(tgt), rows, cols](std::span<const double> g,
                                                                 GradSink& sink) {
        auto dst = sink[0];
        const double s = g[0] / static_cast<double>(rows);
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t c = 0; c < cols; ++c) {
            const std::size_t i = r * cols + c;
            dst[i] += s * (std::exp(logp[i]) - (c == tgt[r] ? 1.0 : 0.0));
          }
        }
      });
}

/// Per-sample softened KL(teacher || student), multiplied by T^2 when
/// `t2_scaling` is set. The teacher side is a constant.
inline Tensor kl_divergence(const Tensor& student_logits, const Tensor& teacher_logits,
                            double temperature, bool t2_scaling = true) {
  if (!(temperature > 0.0)) {
    throw ConfigError("kl_divergence: temperature must be > 0, got " +
                      std::to_string(temperature));
  }
  detail::require_2d(student_logits, "kl_divergence");
  detail::require_same_shape(student_logits, teacher_logits, "kl_divergence");
  detail::require_finite(student_logits, "kl_divergence");
  detail::require_finite(teacher_logits, "kl_divergence");
  const std::size_t rows = student_logits.dim(0), cols = student_logits.dim(1);
  const double inv_t = 1.0 / temperature;
  const double factor = t2_scaling ? temperature * temperature : 1.0;

  std::vector<double> ss(student_logits.size()), tt(teacher_logits.size());
  for (std::size_t i = 0; i < ss.size(); ++i) {
    ss[i] = student_logits[i] * inv_t;
    tt[i] = teacher_logits[i] * inv_t;
  }
  std::vector<double> logq(ss.size()), logp(tt.size());
  detail::log_softmax_rows(ss.data(), logq.data(), rows, cols);
  detail::log_softmax_rows(tt.data(), logp.data(), rows, cols);

  std::vector<double> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double acc = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      const std::size_t i = r * cols + c;
      const double p = std::exp(logp[i]);
      if (p > 0.0) acc += p * (logp[i] - logq[i]);
    }
    out[r] = factor * acc;
  }
  // d/ds of factor * sum p (log p - log q) = factor / T * (q - p)
  const double gscale = factor * inv_t;
  return Tape::record(
      OpKind::kl_divergence, {&student_logits}, {rows}, std::move(out),
      [logp = std::move(logp), logq = std::move(logq), rows, cols, gscale](
          std::span<const double> g, GradSink& sink) {
        auto dst = sink[0];
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t c = 0; c < cols; ++c) {
            const std::size_t i = r * cols + c;
            dst[i] += g[r] * gscale * (std::exp(logq[i]) - std::exp(logp[i]));
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Gradient control

inline Tensor detach(const Tensor& x) { return x.detached(); }

/// Per-sample w*a + (1-w)*b with w [B] broadcast over features.
inline Tensor convex_combine(const Tensor& a, const Tensor& b, const Tensor& w) {
  detail::require_2d(a, "convex_combine");
  detail::require_same_shape(a, b, "convex_combine");
  const std::size_t rows = a.dim(0), cols = a.dim(1);
  if (w.size() != rows) {
    throw ShapeError("convex_combine: weights " + to_string(w.shape()) + " for inputs " +
                     to_string(a.shape()));
  }
  for (double v : w.values()) {
    if (!(v >= -1e-9 && v <= 1.0 + 1e-9)) {
      throw InvariantError("convex_combine: weight " + std::to_string(v) + " outside [0, 1]");
    }
  }
  std::vector<double> out(a.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double wr = w[r];
    for (std::size_t c = 0; c < cols; ++c) {
      const std::size_t i = r * cols + c;
      out[i] = wr * a[i] + (1.0 - wr) * b[i];
    }
  }
  Tensor av = a.detached(), bv = b.detached(), wv = w.detached();
  return Tape::record(OpKind::convex_combine, {&a, &b, &w}, a.shape(), std::move(out),
                      [av, bv, wv, rows, cols](std::span<const double> g, GradSink& sink) {
                        if (sink.wants(0)) {
                          auto dst = sink[0];
                          for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i] * wv[i / cols];
                        }
                        if (sink.wants(1)) {
                          auto dst = sink[1];
                          for (std::size_t i = 0; i < g.size(); ++i) {
                            dst[i] += g[i] * (1.0 - wv[i / cols]);
                          }
                        }
                        if (sink.wants(2)) {
                          auto dst = sink[2];
                          for (std::size_t r = 0; r < rows; ++r) {
                            double acc = 0.0;
                            for (std::size_t c = 0; c < cols; ++c) {
                              const std::size_t i = r * cols + c;
                              acc += g[i] * (av[i] - bv[i]);
                            }
                            dst[r] += acc;
                          }
                        }
                      });
}

/// Forward value is `hard` exactly; the gradient flows to `soft` unchanged.
/// Equivalent to soft + detach(hard - soft) without the rounding that
/// expression would introduce.
inline Tensor straight_through(const Tensor& hard, const Tensor& soft) {
  detail::require_same_shape(hard, soft, "straight_through");
  if (hard.requires_grad()) throw UsageError("straight_through: hard value must be detached");
  std::vector<double> out(hard.values().begin(), hard.values().end());
  return Tape::record(OpKind::straight_through, {&soft}, soft.shape(), std::move(out),
                      [](std::span<const double> g, GradSink& sink) {
                        auto dst = sink[0];
                        for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
                      });
}

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.values()) acc += v;
  return Tape::record(OpKind::sum, {&x}, {}, {acc},
                      [](std::span<const double> g, GradSink& sink) {
                        auto dst = sink[0];
                        for (double& v : dst) v += g[0];
                      });
}

inline Tensor mean(const Tensor& x) {
  if (x.size() == 0) throw ShapeError("mean: empty tensor");
  double acc = 0.0;
  for (double v : x.values()) acc += v;
  const double n = static_cast<double>(x.size());
  return Tape::record(OpKind::mean, {&x}, {}, {acc / n},
                      [n](std::span<const double> g, GradSink& sink) {
                        auto dst = sink[0];
                        for (double& v : dst) v += g[0] / n;
                      });
}

/// Row sums of x [B x d] -> [B].
inline Tensor row_sum(const Tensor& x) {
  detail::require_2d(x, "row_sum");
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  std::vector<double> out(rows, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) out[r] += x[r * cols + c];
  }
  return Tape::record(OpKind::row_sum, {&x}, {rows}, std::move(out),
                      [cols](std::span<const double> g, GradSink& sink) {
                        auto dst = sink[0];
                        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g[i / cols];
                      });
}

/// Rows of x scaled to unit L2 norm; all-zero rows stay zero.
inline Tensor normalize_rows(const Tensor& x) {
  detail::require_2d(x, "normalize_rows");
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  std::vector<double> out(x.size(), 0.0), norms(rows, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    double sq = 0.0;
    for (std::size_t c = 0; c < cols; ++c) sq += x[r * cols + c] * x[r * cols + c];
    norms[r] = std::sqrt(sq);
    if (norms[r] == 0.0) continue;
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = x[r * cols + c] / norms[r];
  }
  Tensor y(x.shape(), out);
  return Tape::record(
      OpKind::normalize_rows, {&x}, x.shape(), std::move(out),
      [y, norms = std::move(norms), rows, cols](std::span<const double> g, GradSink& sink) {
        auto dst = sink[0];
        for (std::size_t r = 0; r < rows; ++r) {
          if (norms[r] == 0.0) continue;
          double dot = 0.0;
          for (std::size_t c = 0; c < cols; ++c) dot += y[r * cols + c] * g[r * cols + c];
          for (std::size_t c = 0; c < cols; ++c) {
            const std::size_t i = r * cols + c;
            dst[i] += (g[i] - y[i] * dot) / norms[r];
          }
        }
      });
}

}  // namespace sakd
