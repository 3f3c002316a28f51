#pragma once

// Differentiable tensor operations recorded on a Tape.

#include <cstdint>
#include <span>
#include <vector>

#include "kla/tape.hpp"

namespace kla::ad {

// Elementwise, equal shapes.
Var add(Tape& tape, Var a, Var b);
Var sub(Tape& tape, Var a, Var b);
Var mul(Tape& tape, Var a, Var b);
Var div(Tape& tape, Var a, Var b);

Var add_scalar(Tape& tape, Var a, double c);
Var mul_scalar(Tape& tape, Var a, double c);

Var exp(Tape& tape, Var a);
Var log(Tape& tape, Var a);
Var pow(Tape& tape, Var a, double exponent);
Var sigmoid(Tape& tape, Var a);
/// x * sigmoid(x)
Var silu(Tape& tape, Var a);
/// log(1 + exp(x))
Var softplus(Tape& tape, Var a);

Var sum(Tape& tape, Var a);
Var mean(Tape& tape, Var a);

/// x (..., in) times w (in, out).
Var matmul(Tape& tape, Var x, Var w);
/// x (..., D) plus bias (D).
Var add_bias(Tape& tape, Var x, Var bias);
Var linear(Tape& tape, Var x, Var w);
Var linear(Tape& tape, Var x, Var w, Var bias);

/// Root-mean-square normalization over the last axis with a learnable
/// per-feature scale: x / sqrt(mean(x^2) + eps) * scale.
Var rms_norm(Tape& tape, Var x, Var scale, double eps = 1e-6);

/// Rows of `table` (V x D) selected by ids; output shape is `prefix` + (D).
Var gather_rows(Tape& tape, Var table, std::span<const std::int32_t> ids, const Shape& prefix);

/// Columns [start, start + len) of the last axis.
Var slice_last(Tape& tape, Var x, std::size_t start, std::size_t len);

/// x (B, T, D) -> (B, D) at time index t.
Var select_time(Tape& tape, Var x, std::size_t t);
/// x (B, D) -> (B, T, D), repeated along time.
Var repeat_time(Tape& tape, Var x, std::size_t steps);
/// x (B, ...) -> (S*B, ...), sample-major copies.
Var tile_batch(Tape& tape, Var x, std::size_t copies);

/// Depthwise causal convolution over time: x (B, T, D), w (K, D), bias (D),
/// y[b,t,d] = bias[d] + sum_j w[j,d] x[b,t-j,d] with zero left padding.
Var causal_conv1d(Tape& tape, Var x, Var w, Var bias);

/// log(sum(exp(x))) over the last axis, computed with max subtraction.
Var logsumexp(Tape& tape, Var x);

/// Mean negative log-softmax of targets over positions with mask != 0.
/// logits (B, T, V); targets and mask are B*T. Throws on an empty mask.
Var cross_entropy(Tape& tape, Var logits, std::span<const std::int32_t> targets,
                  std::span<const std::uint8_t> mask);

/// Monte-Carlo marginal likelihood: logits hold `samples` sample-major
/// copies of a (B, T, V) batch. Per position,
///   -logsumexp_s(log p(target | sample s)) + log S,
/// averaged over masked positions.
Var mc_marginal_nll(Tape& tape, Var logits, std::span<const std::int32_t> targets,
                    std::span<const std::uint8_t> mask, std::size_t samples);

}  // namespace kla::ad
