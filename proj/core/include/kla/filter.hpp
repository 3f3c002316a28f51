#pragma once

// Diagonal linear-Gaussian filtering in information form.
//
// Every quantity is laid out time-major over lanes: value (t, l) at index
// t * lanes + l, where a lane is one scalar recursion (batch, slot, channel).
// Dynamics vectors may be shorter than the lane count; lane l then reads
// dynamics entry l % dyn.size(), which broadcasts (slot, channel) parameters
// over a leading batch axis.

#include <concepts>
#include <cstddef>
#include <span>
#include <utility>
#include <vector>

#include "kla/scan.hpp"

namespace kla::filter {

inline constexpr double kDeltaMin = 0.001;
inline constexpr double kDeltaMax = 0.1;
/// Below this value of a*delta the closed form loses precision and the
/// first-order series is used instead.
inline constexpr double kSmallArgument = 1e-6;

template <std::floating_point T>
struct OUParams {
  std::vector<T> a;      // continuous-time decay rate, > 0
  std::vector<T> p;      // process-noise scale, >= 0
  std::vector<T> delta;  // timestep
};

template <std::floating_point T>
struct Dynamics {
  std::vector<T> a_bar;  // exp(-a delta)
  std::vector<T> p_bar;  // (p^2 / 2a)(1 - exp(-2 a delta))

  [[nodiscard]] std::size_t size() const { return a_bar.size(); }
};

/// Exact OU discretization of one (a, p, delta) triple.
template <std::floating_point T>
std::pair<T, T> ou_discretize(T a, T p, T delta);

template <std::floating_point T>
Dynamics<T> ou_discretize(const OUParams<T>& params);

/// Forward-Euler discretization (a_bar = 1 - a delta, p_bar = p^2 delta).
/// Only used by the discretization ablation.
template <std::floating_point T>
Dynamics<T> euler_discretize(const OUParams<T>& params);

/// Token evidence expanded to lanes: observation operator k, precision
/// lambda_v and observed value v for every (t, l).
template <std::floating_point T>
struct Evidence {
  std::size_t steps = 0;
  std::size_t lanes = 0;
  std::vector<T> k;
  std::vector<T> lambda_v;
  std::vector<T> v;
};

/// Builds lane evidence for one sequence from per-step key k (T x N), value
/// v (T x D) and value precision lambda_v (T x D). Lane index is n * D + d.
template <std::floating_point T>
Evidence<T> expand_evidence(std::span<const T> k, std::span<const T> v, std::span<const T> lambda_v,
                            std::size_t steps, std::size_t slots, std::size_t channels);

/// phi = k^2 (outer) lambda_v for one step: k has N entries, lambda_v has D.
/// Result is N x D.
template <std::floating_point T>
std::vector<T> compute_phi(std::span<const T> k, std::span<const T> lambda_v);

/// Per-lane evidence precision k^2 lambda_v over all steps.
template <std::floating_point T>
std::vector<T> evidence_precision(const Evidence<T>& ev);

/// Per-lane evidence drive k lambda_v v over all steps.
template <std::floating_point T>
std::vector<T> evidence_drive(const Evidence<T>& ev);

template <std::floating_point T>
std::vector<scan::Mobius<T>> build_mobius_elements(const Dynamics<T>& dyn, std::span<const T> phi,
                                                   std::size_t lanes);

/// Posterior precision path lambda_1..lambda_T from a Moebius prefix scan.
template <std::floating_point T>
std::vector<T> precision_path(const Dynamics<T>& dyn, std::span<const T> phi, std::span<const T> lambda0,
                              const scan::ScanPlan& plan);

/// f_t = a_bar / (a_bar^2 + p_bar lambda_{t-1}), b_t = drive_t.
template <std::floating_point T>
std::vector<scan::Affine<T>> build_affine_elements(const Dynamics<T>& dyn, std::span<const T> lambda_path,
                                                   std::span<const T> lambda0, std::span<const T> drive);

template <std::floating_point T>
struct MeanPath {
  std::vector<T> eta;
  std::vector<T> mu;
};

/// Information-mean path from an affine prefix scan, normalized by the
/// precision path. Throws DomainError if a queried precision is zero.
template <std::floating_point T>
MeanPath<T> mean_path(std::span<const scan::Affine<T>> elements, std::span<const T> eta0,
                      std::span<const T> lambda_path, const scan::ScanPlan& plan);

template <std::floating_point T>
struct BeliefPath {
  std::size_t steps = 0;
  std::size_t lanes = 0;
  std::vector<T> lambda;
  std::vector<T> eta;
  std::vector<T> mu;
  std::vector<T> gate;  // f_t

  [[nodiscard]] T sigma2(std::size_t i) const { return T{1} / lambda[i]; }
};

/// The recurrent filter from evidence terms phi = k^2 lv and drive = k lv v:
/// one fused predict/update per step and lane. Throws DomainError on a
/// non-positive predict denominator or zero precision.
template <std::floating_point T>
BeliefPath<T> recurrent_filter(const Dynamics<T>& dyn, std::span<const T> phi, std::span<const T> drive,
                               std::span<const T> lambda0, std::span<const T> eta0);

/// Parallel mode: precision scan, then affine mean scan. Sequential mode: the
/// recurrent filter (the runtime baseline).
template <std::floating_point T>
BeliefPath<T> information_filter(const Dynamics<T>& dyn, const Evidence<T>& ev, std::span<const T> lambda0,
                                 std::span<const T> eta0, scan::ScanMode mode);

template <std::floating_point T>
struct MomentPath {
  std::vector<T> mu;
  std::vector<T> sigma;  // posterior variance
};

/// Classic predict/update Kalman filter in moment form (diagonal case).
template <std::floating_point T>
MomentPath<T> recurrent_filter_moment(const Dynamics<T>& dyn, const Evidence<T>& ev, std::span<const T> mu0,
                                      std::span<const T> sigma0);

template <std::floating_point T>
struct ConvolutionPath {
  std::vector<T> lambda;
  std::vector<T> eta;
};

/// Direct O(T^2) evaluation of the deterministic time-invariant case:
///   lambda_t = a^{-2t} lambda_0 + sum_{s<=t} a^{-2(t-s)} k^2 lambda_v_s
///   eta_t    = a^{-t}  eta_0    + sum_{s<=t} a^{-(t-s)}  k lambda_v_s v_s
/// Requires p_bar == 0 and a time-invariant k.
template <std::floating_point T>
ConvolutionPath<T> lti_convolution_oracle(const Dynamics<T>& dyn, const Evidence<T>& ev,
                                          std::span<const T> lambda0, std::span<const T> eta0);

}  // namespace kla::filter
