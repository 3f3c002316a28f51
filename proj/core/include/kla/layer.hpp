#pragma once

// The KLA sequence mixer: projections to (q, k, v, lambda_v), the two-pass
// information filter over B*N*D lanes and the query readout.
//
// Tensor layouts are row-major: x, v, lambda_v and outputs are (B, T, D);
// q and k are (B, T, N). Filter lanes are ordered l = (b*N + n)*D + d and
// belief paths are time-major (t, l).

#include <concepts>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "kla/adjoint.hpp"
#include "kla/filter.hpp"
#include "kla/tape.hpp"

namespace kla::layer {

inline constexpr double kLambdaVFloor = 1e-6;
inline constexpr double kNormEps = 1e-6;
inline constexpr double kLambda0 = 1.0;
inline constexpr double kEta0 = 0.0;
inline constexpr double kInitP = 0.01;
inline constexpr double kInitAMin = 0.5;
inline constexpr double kInitAMax = 8.0;
inline constexpr std::size_t kDefaultSamples = 10;
inline constexpr std::size_t kAttentionCap = 1024;

template <std::floating_point T>
struct LayerParams {
  std::size_t d_model = 0;  // D
  std::size_t d_state = 0;  // N
  std::vector<T> w_k;       // (D, N)
  std::vector<T> w_q;       // (D, N)
  std::vector<T> w_v;       // (D, D)
  std::vector<T> w_lv;      // (D, D)
  std::vector<T> b_lv;      // (D)
  std::vector<T> k_norm;    // (N)
  std::vector<T> q_norm;    // (N)
  std::vector<T> a_log;     // (N, D), a = exp(a_log)
  std::vector<T> p;         // (N, D)
  std::vector<T> dt_raw;    // (N, D), delta = dmin + (dmax - dmin) sigmoid(dt_raw)

  template <std::floating_point U>
  [[nodiscard]] LayerParams<U> cast() const;
};

/// Glorot-normal projections, unit norm scales, a log-spaced over slots in
/// [0.5, 8], p = 0.01, delta log-uniform over the allowed range.
LayerParams<double> init_layer_params(std::size_t d_model, std::size_t d_state, std::uint64_t seed);

struct LayerOptions {
  scan::ScanMode mode = scan::ScanMode::parallel;
  ad::Discretization discretization = ad::Discretization::ou;
  /// Ablation: process noise held at zero regardless of p.
  bool zero_process_noise = false;
};

double delta_from_raw(double raw);
double raw_from_delta(double delta);

template <std::floating_point T>
filter::OUParams<T> ou_params(const LayerParams<T>& params, const LayerOptions& options);

template <std::floating_point T>
filter::Dynamics<T> layer_dynamics(const LayerParams<T>& params, const LayerOptions& options);

template <std::floating_point T>
struct Projections {
  std::size_t batch = 0, steps = 0, slots = 0, channels = 0;
  std::vector<T> k;         // (B, T, N)
  std::vector<T> q;         // (B, T, N)
  std::vector<T> v;         // (B, T, D)
  std::vector<T> lambda_v;  // (B, T, D)
};

template <std::floating_point T>
Projections<T> project_inputs(std::span<const T> x, std::size_t batch, std::size_t steps,
                              const LayerParams<T>& params);

template <std::floating_point T>
struct LayerOutput {
  std::size_t batch = 0, steps = 0, channels = 0;
  std::vector<T> y_mu;     // (B, T, D)
  std::vector<T> y_sigma;  // (B, T, D), empty unless requested
  filter::BeliefPath<T> belief;
};

/// Filter and readout given projected inputs and discretized dynamics.
template <std::floating_point T>
LayerOutput<T> filter_readout(const Projections<T>& proj, const filter::Dynamics<T>& dyn, scan::ScanMode mode,
                              bool want_variance);

template <std::floating_point T>
LayerOutput<T> kla_forward(std::span<const T> x, std::size_t batch, std::size_t steps, const LayerParams<T>& params,
                           bool want_variance, const LayerOptions& options = {});

/// Standard-normal noise for posterior sample `sample`, time-major lane index i.
double posterior_noise(std::uint64_t seed, std::size_t sample, std::size_t index);

/// S readout samples y^(s) = sum_n q z^(s) with z ~ N(mu, variance_scale / lambda).
/// Output is sample-major (S, B, T, D). variance_scale = 0 is the
/// infinite-precision limit.
template <std::floating_point T>
std::vector<T> sample_posterior(const filter::BeliefPath<T>& belief, std::span<const T> q, std::size_t batch,
                                std::size_t slots, std::size_t channels, std::size_t samples, std::uint64_t seed,
                                T variance_scale = T{1});

struct AttentionMatrices {
  std::size_t steps = 0;
  std::vector<std::size_t> channels;
  /// Per selected channel d: (T, T) with entry [t, s] =
  ///   sum_n q_t[n] / lambda_t[n, d] * prod_{r=s+1..t} f_r[n, d] * k_s[n] lambda_v_s[d].
  std::vector<double> matrices;
  /// Per selected channel: contribution of the initial information mean, (T).
  std::vector<double> init_term;
  /// Inputs the matrices act on: v[t, d] for each selected channel, (C, T).
  std::vector<double> values;
  /// Optional per-lane kernels W[t, s] = prod_{r=s+1..t} f_r * k_s lambda_v_s,
  /// laid out (C, N, T, T).
  std::vector<double> kernels;
};

/// Unrolls the mean recursion of one sequence x (T, D) into explicit causal
/// matrices. Throws std::invalid_argument when T exceeds `cap`.
AttentionMatrices materialize_attention_matrix(const LayerParams<double>& params, std::span<const double> x,
                                               std::size_t steps, std::span<const std::size_t> channels,
                                               const LayerOptions& options = {}, std::size_t cap = kAttentionCap,
                                               bool keep_kernels = false);

struct MixerConfig {
  std::size_t batch = 0, steps = 0, slots = 0, channels = 0;
  LayerOptions options;
  /// Replace the posterior mean by one reparameterized draw per lane.
  bool sample = false;
  std::uint64_t noise_seed = 0;
};

/// Differentiable filter + readout: q, k (B,T,N); v, lambda_v (B,T,D);
/// a_log, p, dt_raw (N,D). Returns y (B,T,D). The backward pass uses the scan
/// adjoints of kla/adjoint.hpp.
ad::Var kla_mixer(ad::Tape& tape, ad::Var q, ad::Var k, ad::Var v, ad::Var lambda_v, ad::Var a_log, ad::Var p,
                  ad::Var dt_raw, const MixerConfig& config);

template <std::floating_point T>
template <std::floating_point U>
LayerParams<U> LayerParams<T>::cast() const {
  const auto conv = [](const std::vector<T>& src) { return std::vector<U>(src.begin(), src.end()); };
  LayerParams<U> out;
  out.d_model = d_model;
  out.d_state = d_state;
  out.w_k = conv(w_k);
  out.w_q = conv(w_q);
  out.w_v = conv(w_v);
  out.w_lv = conv(w_lv);
  out.b_lv = conv(b_lv);
  out.k_norm = conv(k_norm);
  out.q_norm = conv(q_norm);
  out.a_log = conv(a_log);
  out.p = conv(p);
  out.dt_raw = conv(dt_raw);
  return out;
}

}  // namespace kla::layer
