#include "kla/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace kla::ad {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape != b.shape) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_string(a.shape) + " vs " +
                                shape_string(b.shape));
  }
}

double sigmoid_scalar(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double softplus_scalar(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

// y = fn(x); dy/dx = deriv(x, y)
template <typename Fn, typename Deriv>
Var unary(Tape& tape, Var a, Fn fn, Deriv deriv) {
  const Tensor& x = tape.value(a);
  Tensor y(x.shape);
  for (std::size_t i = 0; i < x.size(); ++i) y.data[i] = fn(x.data[i]);
  return tape.record(std::move(y), {a}, [a, deriv](Tape& t, const Tensor& g) {
    if (!t.requires_grad(a)) return;
    const Tensor& xv = t.value(a);
    Tensor& ga = t.grad_buffer(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga.data[i] += g.data[i] * deriv(xv.data[i]);
  });
}

std::size_t rows_of(const Tensor& x) { return x.size() / x.last_dim(); }

}  // namespace

Var add(Tape& tape, Var a, Var b) {
  const Tensor& x = tape.value(a);
  const Tensor& y = tape.value(b);
  require_same_shape(x, y, "add");
  Tensor out(x.shape);
  for (std::size_t i = 0; i < x.size(); ++i) out.data[i] = x.data[i] + y.data[i];
  return tape.record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

Var sub(Tape& tape, Var a, Var b) {
  const Tensor& x = tape.value(a);
  const Tensor& y = tape.value(b);
  require_same_shape(x, y, "sub");
  Tensor out(x.shape);
  for (std::size_t i = 0; i < x.size(); ++i) out.data[i] = x.data[i] - y.data[i];
  return tape.record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    t.accumulate(a, g);
    if (t.requires_grad(b)) {
      Tensor& gb = t.grad_buffer(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb.data[i] -= g.data[i];
    }
  });
}

Var mul(Tape& tape, Var a, Var b) {
  const Tensor& x = tape.value(a);
  const Tensor& y = tape.value(b);
  require_same_shape(x, y, "mul");
  Tensor out(x.shape);
  for (std::size_t i = 0; i < x.size(); ++i) out.data[i] = x.data[i] * y.data[i];
  return tape.record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    const Tensor& xv = t.value(a);
    const Tensor& yv = t.value(b);
    if (t.requires_grad(a)) {
      Tensor& ga = t.grad_buffer(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga.data[i] += g.data[i] * yv.data[i];
    }
    if (t.requires_grad(b)) {
      Tensor& gb = t.grad_buffer(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb.data[i] += g.data[i] * xv.data[i];
    }
  });
}

Var div(Tape& tape, Var a, Var b) {
  const Tensor& x = tape.value(a);
  const Tensor& y = tape.value(b);
  require_same_shape(x, y, "div");
  Tensor out(x.shape);
  for (std::size_t i = 0; i < x.size(); ++i) out.data[i] = x.data[i] / y.data[i];
  return tape.record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    const Tensor& xv = t.value(a);
    const Tensor& yv = t.value(b);
    if (t.requires_grad(a)) {
      Tensor& ga = t.grad_buffer(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga.data[i] += g.data[i] / yv.data[i];
    }
    if (t.requires_grad(b)) {
      Tensor& gb = t.grad_buffer(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb.data[i] -= g.data[i] * xv.data[i] / (yv.data[i] * yv.data[i]);
    }
  });
}

Var add_scalar(Tape& tape, Var a, double c) {
  return unary(tape, a, [c](double x) { return x + c; }, [](double) { return 1.0; });
}

Var mul_scalar(Tape& tape, Var a, double c) {
  return unary(tape, a, [c](double x) { return x * c; }, [c](double) { return c; });
}

Var exp(Tape& tape, Var a) {
  return unary(tape, a, [](double x) { return std::exp(x); }, [](double x) { return std::exp(x); });
}

Var log(Tape& tape, Var a) {
  return unary(tape, a, [](double x) { return std::log(x); }, [](double x) { return 1.0 / x; });
}

Var pow(Tape& tape, Var a, double exponent) {
  return unary(
      tape, a, [exponent](double x) { return std::pow(x, exponent); },
      [exponent](double x) { return exponent * std::pow(x, exponent - 1.0); });
}

Var sigmoid(Tape& tape, Var a) {
  return unary(tape, a, sigmoid_scalar, [](double x) {
    const double s = sigmoid_scalar(x);
    return s * (1.0 - s);
  });
}

Var silu(Tape& tape, Var a) {
  return unary(
      tape, a, [](double x) { return x * sigmoid_scalar(x); },
      [](double x) {
        const double s = sigmoid_scalar(x);
        return s * (1.0 + x * (1.0 - s));
      });
}

Var softplus(Tape& tape, Var a) { return unary(tape, a, softplus_scalar, sigmoid_scalar); }

Var sum(Tape& tape, Var a) {
  const Tensor& x = tape.value(a);
  double s = 0;
  for (const double v : x.data) s += v;
  return tape.record(Tensor({1}, {s}), {a}, [a](Tape& t, const Tensor& g) {
    if (!t.requires_grad(a)) return;
    Tensor& ga = t.grad_buffer(a);
    for (double& v : ga.data) v += g.data[0];
  });
}

Var mean(Tape& tape, Var a) { return mul_scalar(tape, sum(tape, a), 1.0 / static_cast<double>(tape.value(a).size())); }

Var matmul(Tape& tape, Var x, Var w) {
  const Tensor& xv = tape.value(x);
  const Tensor& wv = tape.value(w);
  if (wv.rank() != 2 || xv.last_dim() != wv.dim(0)) {
    throw std::invalid_argument("matmul: cannot multiply " + shape_string(xv.shape) + " by " + shape_string(wv.shape));
  }
  const auto m = static_cast<Eigen::Index>(rows_of(xv));
  const auto k = static_cast<Eigen::Index>(wv.dim(0));
  const auto n = static_cast<Eigen::Index>(wv.dim(1));
  Shape out_shape = xv.shape;
  out_shape.back() = wv.dim(1);
  Tensor out(out_shape);
  MapMat(out.data.data(), m, n).noalias() = ConstMapMat(xv.data.data(), m, k) * ConstMapMat(wv.data.data(), k, n);
  return tape.record(std::move(out), {x, w}, [x, w, m, k, n](Tape& t, const Tensor& g) {
    const ConstMapMat gm(g.data.data(), m, n);
    if (t.requires_grad(x)) {
      Tensor& gx = t.grad_buffer(x);
      MapMat(gx.data.data(), m, k).noalias() += gm * ConstMapMat(t.value(w).data.data(), k, n).transpose();
    }
    if (t.requires_grad(w)) {
      Tensor& gw = t.grad_buffer(w);
      MapMat(gw.data.data(), k, n).noalias() += ConstMapMat(t.value(x).data.data(), m, k).transpose() * gm;
    }
  });
}

Var add_bias(Tape& tape, Var x, Var bias) {
  const Tensor& xv = tape.value(x);
  const Tensor& bv = tape.value(bias);
  const std::size_t d = xv.last_dim();
  if (bv.size() != d) throw std::invalid_argument("add_bias: bias size does not match last axis");
  Tensor out = xv;
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += bv.data[i % d];
  return tape.record(std::move(out), {x, bias}, [x, bias, d](Tape& t, const Tensor& g) {
    t.accumulate(x, g);
    if (t.requires_grad(bias)) {
      Tensor& gb = t.grad_buffer(bias);
      for (std::size_t i = 0; i < g.size(); ++i) gb.data[i % d] += g.data[i];
    }
  });
}

Var linear(Tape& tape, Var x, Var w) { return matmul(tape, x, w); }

Var linear(Tape& tape, Var x, Var w, Var bias) { return add_bias(tape, matmul(tape, x, w), bias); }

Var rms_norm(Tape& tape, Var x, Var scale, double eps) {
  const Tensor& xv = tape.value(x);
  const Tensor& sv = tape.value(scale);
  const std::size_t d = xv.last_dim();
  if (sv.size() != d) throw std::invalid_argument("rms_norm: scale size does not match last axis");
  const std::size_t rows = rows_of(xv);
  Tensor out(xv.shape);
  std::vector<double> inv(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv.data.data() + r * d;
    double ss = 0;
    for (std::size_t j = 0; j < d; ++j) ss += row[j] * row[j];
    inv[r] = 1.0 / std::sqrt(ss / static_cast<double>(d) + eps);
    for (std::size_t j = 0; j < d; ++j) out.data[r * d + j] = row[j] * inv[r] * sv.data[j];
  }
  return tape.record(std::move(out), {x, scale}, [x, scale, d, rows, inv = std::move(inv)](Tape& t, const Tensor& g) {
    const Tensor& xv = t.value(x);
    const Tensor& sv = t.value(scale);
    const bool need_x = t.requires_grad(x);
    const bool need_s = t.requires_grad(scale);
    Tensor* gx = need_x ? &t.grad_buffer(x) : nullptr;
    Tensor* gs = need_s ? &t.grad_buffer(scale) : nullptr;
    for (std::size_t r = 0; r < rows; ++r) {
      const double* row = xv.data.data() + r * d;
      const double* gr = g.data.data() + r * d;
      const double ir = inv[r];
      if (need_s) {
        for (std::size_t j = 0; j < d; ++j) gs->data[j] += gr[j] * row[j] * ir;
      }
      if (need_x) {
        double dot = 0;
        for (std::size_t j = 0; j < d; ++j) dot += gr[j] * sv.data[j] * row[j];
        const double c = ir * ir * ir * dot / static_cast<double>(d);
        for (std::size_t j = 0; j < d; ++j) gx->data[r * d + j] += ir * sv.data[j] * gr[j] - c * row[j];
      }
    }
  });
}

Var gather_rows(Tape& tape, Var table, std::span<const std::int32_t> ids, const Shape& prefix) {
  const Tensor& tv = tape.value(table);
  if (tv.rank() != 2) throw std::invalid_argument("gather_rows: table must be rank 2");
  if (numel(prefix) != ids.size()) throw std::invalid_argument("gather_rows: prefix does not match id count");
  const std::size_t vocab = tv.dim(0);
  const std::size_t d = tv.dim(1);
  Shape out_shape = prefix;
  out_shape.push_back(d);
  Tensor out(out_shape);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw std::invalid_argument("gather_rows: id " + std::to_string(ids[i]) + " out of range [0, " +
                                  std::to_string(vocab) + ")");
    }
    std::copy_n(tv.data.data() + static_cast<std::size_t>(ids[i]) * d, d, out.data.data() + i * d);
  }
  std::vector<std::int32_t> saved(ids.begin(), ids.end());
  return tape.record(std::move(out), {table}, [table, d, saved = std::move(saved)](Tape& t, const Tensor& g) {
    if (!t.requires_grad(table)) return;
    Tensor& gt = t.grad_buffer(table);
    for (std::size_t i = 0; i < saved.size(); ++i) {
      double* dst = gt.data.data() + static_cast<std::size_t>(saved[i]) * d;
      const double* src = g.data.data() + i * d;
      for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
    }
  });
}

Var slice_last(Tape& tape, Var x, std::size_t start, std::size_t len) {
  const Tensor& xv = tape.value(x);
  const std::size_t d = xv.last_dim();
  if (start + len > d) throw std::invalid_argument("slice_last: range exceeds last axis");
  const std::size_t rows = rows_of(xv);
  Shape out_shape = xv.shape;
  out_shape.back() = len;
  Tensor out(out_shape);
  for (std::size_t r = 0; r < rows; ++r) std::copy_n(xv.data.data() + r * d + start, len, out.data.data() + r * len);
  return tape.record(std::move(out), {x}, [x, start, len, d, rows](Tape& t, const Tensor& g) {
    if (!t.requires_grad(x)) return;
    Tensor& gx = t.grad_buffer(x);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t j = 0; j < len; ++j) gx.data[r * d + start + j] += g.data[r * len + j];
    }
  });
}

Var select_time(Tape& tape, Var x, std::size_t time) {
  const Tensor& xv = tape.value(x);
  if (xv.rank() != 3 || time >= xv.dim(1)) throw std::invalid_argument("select_time: expects (B,T,D) and t < T");
  const std::size_t b = xv.dim(0), steps = xv.dim(1), d = xv.dim(2);
  Tensor out({b, d});
  for (std::size_t i = 0; i < b; ++i) std::copy_n(xv.data.data() + (i * steps + time) * d, d, out.data.data() + i * d);
  return tape.record(std::move(out), {x}, [x, b, steps, d, time](Tape& t, const Tensor& g) {
    if (!t.requires_grad(x)) return;
    Tensor& gx = t.grad_buffer(x);
    for (std::size_t i = 0; i < b; ++i) {
      for (std::size_t j = 0; j < d; ++j) gx.data[(i * steps + time) * d + j] += g.data[i * d + j];
    }
  });
}

Var repeat_time(Tape& tape, Var x, std::size_t steps) {
  const Tensor& xv = tape.value(x);
  if (xv.rank() != 2) throw std::invalid_argument("repeat_time: expects (B,D)");
  const std::size_t b = xv.dim(0), d = xv.dim(1);
  Tensor out({b, steps, d});
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t s = 0; s < steps; ++s) std::copy_n(xv.data.data() + i * d, d, out.data.data() + (i * steps + s) * d);
  }
  return tape.record(std::move(out), {x}, [x, b, steps, d](Tape& t, const Tensor& g) {
    if (!t.requires_grad(x)) return;
    Tensor& gx = t.grad_buffer(x);
    for (std::size_t i = 0; i < b; ++i) {
      for (std::size_t s = 0; s < steps; ++s) {
        for (std::size_t j = 0; j < d; ++j) gx.data[i * d + j] += g.data[(i * steps + s) * d + j];
      }
    }
  });
}

Var tile_batch(Tape& tape, Var x, std::size_t copies) {
  const Tensor& xv = tape.value(x);
  if (copies == 0) throw std::invalid_argument("tile_batch: copies must be >= 1");
  Shape out_shape = xv.shape;
  out_shape.at(0) *= copies;
  Tensor out(out_shape);
  const std::size_t n = xv.size();
  for (std::size_t c = 0; c < copies; ++c) std::copy_n(xv.data.data(), n, out.data.data() + c * n);
  return tape.record(std::move(out), {x}, [x, copies, n](Tape& t, const Tensor& g) {
    if (!t.requires_grad(x)) return;
    Tensor& gx = t.grad_buffer(x);
    for (std::size_t c = 0; c < copies; ++c) {
      for (std::size_t i = 0; i < n; ++i) gx.data[i] += g.data[c * n + i];
    }
  });
}

Var causal_conv1d(Tape& tape, Var x, Var w, Var bias) {
  const Tensor& xv = tape.value(x);
  const Tensor& wv = tape.value(w);
  const Tensor& bv = tape.value(bias);
  if (xv.rank() != 3 || wv.rank() != 2 || wv.dim(1) != xv.dim(2) || bv.size() != xv.dim(2)) {
    throw std::invalid_argument("causal_conv1d: expects x (B,T,D), w (K,D), bias (D)");
  }
  const std::size_t nb = xv.dim(0), steps = xv.dim(1), d = xv.dim(2), kernel = wv.dim(0);
  if (kernel == 0) throw std::invalid_argument("causal_conv1d: kernel must be >= 1");
  Tensor out(xv.shape);
  for (std::size_t b = 0; b < nb; ++b) {
    for (std::size_t t = 0; t < steps; ++t) {
      double* y = out.data.data() + (b * steps + t) * d;
      for (std::size_t c = 0; c < d; ++c) y[c] = bv.data[c];
      for (std::size_t j = 0; j < kernel && j <= t; ++j) {
        const double* xs = xv.data.data() + (b * steps + t - j) * d;
        const double* wj = wv.data.data() + j * d;
        for (std::size_t c = 0; c < d; ++c) y[c] += wj[c] * xs[c];
      }
    }
  }
  return tape.record(std::move(out), {x, w, bias}, [x, w, bias, nb, steps, d, kernel](Tape& t, const Tensor& g) {
    const Tensor& xv = t.value(x);
    const Tensor& wv = t.value(w);
    Tensor* gx = t.requires_grad(x) ? &t.grad_buffer(x) : nullptr;
    Tensor* gw = t.requires_grad(w) ? &t.grad_buffer(w) : nullptr;
    Tensor* gb = t.requires_grad(bias) ? &t.grad_buffer(bias) : nullptr;
    for (std::size_t b = 0; b < nb; ++b) {
      for (std::size_t s = 0; s < steps; ++s) {
        const double* gy = g.data.data() + (b * steps + s) * d;
        if (gb) {
          for (std::size_t c = 0; c < d; ++c) gb->data[c] += gy[c];
        }
        for (std::size_t j = 0; j < kernel && j <= s; ++j) {
          const std::size_t src = (b * steps + s - j) * d;
          for (std::size_t c = 0; c < d; ++c) {
            if (gx) gx->data[src + c] += gy[c] * wv.data[j * d + c];
            if (gw) gw->data[j * d + c] += gy[c] * xv.data[src + c];
          }
        }
      }
    }
  });
}

Var logsumexp(Tape& tape, Var x) {
  const Tensor& xv = tape.value(x);
  const std::size_t d = xv.last_dim();
  const std::size_t rows = rows_of(xv);
  Shape out_shape = xv.shape;
  if (out_shape.empty()) out_shape = {1};
  out_shape.back() = 1;
  Tensor out(out_shape);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv.data.data() + r * d;
    const double m = *std::max_element(row, row + d);
    double s = 0;
    for (std::size_t j = 0; j < d; ++j) s += std::exp(row[j] - m);
    out.data[r] = m + std::log(s);
  }
  return tape.record(std::move(out), {x}, [x, d, rows](Tape& t, const Tensor& g) {
    if (!t.requires_grad(x)) return;
    const Tensor& xv = t.value(x);
    Tensor& gx = t.grad_buffer(x);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* row = xv.data.data() + r * d;
      const double m = *std::max_element(row, row + d);
      double s = 0;
      for (std::size_t j = 0; j < d; ++j) s += std::exp(row[j] - m);
      for (std::size_t j = 0; j < d; ++j) gx.data[r * d + j] += g.data[r] * std::exp(row[j] - m) / s;
    }
  });
}

namespace {

// Stable log-softmax of one row, written into out; returns log-sum-exp.
double log_softmax_row(const double* row, std::size_t v, double* out) {
  const double m = *std::max_element(row, row + v);
  double s = 0;
  for (std::size_t j = 0; j < v; ++j) s += std::exp(row[j] - m);
  const double lse = m + std::log(s);
  for (std::size_t j = 0; j < v; ++j) out[j] = row[j] - lse;
  return lse;
}

std::size_t check_loss_inputs(const Tensor& logits, std::span<const std::int32_t> targets,
                              std::span<const std::uint8_t> mask, std::size_t positions, const char* op) {
  if (targets.size() != positions || mask.size() != positions) {
    throw std::invalid_argument(std::string(op) + ": targets/mask do not match logits " + shape_string(logits.shape));
  }
  std::size_t active = 0;
  const std::size_t vocab = logits.last_dim();
  for (std::size_t i = 0; i < positions; ++i) {
    if (!mask[i]) continue;
    ++active;
    if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= vocab) {
      throw std::invalid_argument(std::string(op) + ": target id out of range at position " + std::to_string(i));
    }
  }
  if (active == 0) throw std::invalid_argument(std::string(op) + ": mask selects no positions");
  return active;
}

}  // namespace

Var cross_entropy(Tape& tape, Var logits, std::span<const std::int32_t> targets, std::span<const std::uint8_t> mask) {
  const Tensor& lv = tape.value(logits);
  const std::size_t vocab = lv.last_dim();
  const std::size_t positions = rows_of(lv);
  const std::size_t active = check_loss_inputs(lv, targets, mask, positions, "cross_entropy");
  double total = 0;
  std::vector<double> logp(vocab);
  for (std::size_t i = 0; i < positions; ++i) {
    if (!mask[i]) continue;
    const double* row = lv.data.data() + i * vocab;
    const double lse = log_softmax_row(row, vocab, logp.data());
    total += lse - row[targets[i]];
  }
  const double inv = 1.0 / static_cast<double>(active);
  std::vector<std::int32_t> tg(targets.begin(), targets.end());
  std::vector<std::uint8_t> mk(mask.begin(), mask.end());
  return tape.record(Tensor({1}, {total * inv}), {logits},
                     [logits, vocab, positions, inv, tg = std::move(tg), mk = std::move(mk)](Tape& t, const Tensor& g) {
                       if (!t.requires_grad(logits)) return;
                       const Tensor& lv = t.value(logits);
                       Tensor& gl = t.grad_buffer(logits);
                       std::vector<double> logp(vocab);
                       const double scale = g.data[0] * inv;
                       for (std::size_t i = 0; i < positions; ++i) {
                         if (!mk[i]) continue;
                         log_softmax_row(lv.data.data() + i * vocab, vocab, logp.data());
                         double* gr = gl.data.data() + i * vocab;
                         for (std::size_t j = 0; j < vocab; ++j) gr[j] += scale * std::exp(logp[j]);
                         gr[tg[i]] -= scale;
                       }
                     });
}

Var mc_marginal_nll(Tape& tape, Var logits, std::span<const std::int32_t> targets, std::span<const std::uint8_t> mask,
                    std::size_t samples) {
  if (samples < 1) throw std::invalid_argument("mc_marginal_nll: sample count must be >= 1");
  const Tensor& lv = tape.value(logits);
  const std::size_t vocab = lv.last_dim();
  const std::size_t rows = rows_of(lv);
  if (rows % samples != 0) throw std::invalid_argument("mc_marginal_nll: logits rows not divisible by sample count");
  const std::size_t positions = rows / samples;
  const std::size_t active = check_loss_inputs(lv, targets, mask, positions, "mc_marginal_nll");
  const double log_s = std::log(static_cast<double>(samples));
  std::vector<double> logp(vocab);
  std::vector<double> per_sample(samples);
  double total = 0;
  for (std::size_t i = 0; i < positions; ++i) {
    if (!mask[i]) continue;
    for (std::size_t s = 0; s < samples; ++s) {
      const double* row = lv.data.data() + (s * positions + i) * vocab;
      const double lse = log_softmax_row(row, vocab, logp.data());
      per_sample[s] = -(lse - row[targets[i]]);
    }
    const double m = *std::max_element(per_sample.begin(), per_sample.end());
    double acc = 0;
    for (const double v : per_sample) acc += std::exp(v - m);
    total += -(m + std::log(acc)) + log_s;
  }
  const double inv = 1.0 / static_cast<double>(active);
  std::vector<std::int32_t> tg(targets.begin(), targets.end());
  std::vector<std::uint8_t> mk(mask.begin(), mask.end());
  return tape.record(
      Tensor({1}, {total * inv}), {logits},
      [logits, vocab, positions, samples, inv, tg = std::move(tg), mk = std::move(mk)](Tape& t, const Tensor& g) {
        if (!t.requires_grad(logits)) return;
        const Tensor& lv = t.value(logits);
        Tensor& gl = t.grad_buffer(logits);
        std::vector<double> logp(vocab * samples);
        std::vector<double> per_sample(samples);
        const double scale = g.data[0] * inv;
        for (std::size_t i = 0; i < positions; ++i) {
          if (!mk[i]) continue;
          for (std::size_t s = 0; s < samples; ++s) {
            const double* row = lv.data.data() + (s * positions + i) * vocab;
            log_softmax_row(row, vocab, logp.data() + s * vocab);
            per_sample[s] = logp[s * vocab + tg[i]];
          }
          const double m = *std::max_element(per_sample.begin(), per_sample.end());
          double acc = 0;
          for (const double v : per_sample) acc += std::exp(v - m);
          for (std::size_t s = 0; s < samples; ++s) {
            const double weight = std::exp(per_sample[s] - m) / acc;
            double* gr = gl.data.data() + (s * positions + i) * vocab;
            for (std::size_t j = 0; j < vocab; ++j) gr[j] += scale * weight * std::exp(logp[s * vocab + j]);
            gr[tg[i]] -= scale * weight;
          }
        }
      });
}

}  // namespace kla::ad
