#pragma once

// Inclusive prefix scans over lane-batched associative elements, plus the two
// element algebras used by the filter: 2x2 Moebius (fractional-linear) maps
// acting on precisions, and 1-D affine maps acting on information means.
//
// Storage is time-major: element (t, l) lives at index t * lanes + l. Lanes
// never interact, so a scan is `lanes` independent recursions over time.

#include <algorithm>
#include <bit>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "kla/error.hpp"

namespace kla::scan {

template <std::floating_point T>
struct Mobius {
  T alpha{1};
  T beta{0};
  T gamma{0};
  T delta{1};

  static constexpr Mobius identity() { return {T{1}, T{0}, T{0}, T{1}}; }
  [[nodiscard]] constexpr T determinant() const { return alpha * delta - beta * gamma; }
  friend constexpr bool operator==(const Mobius&, const Mobius&) = default;
};

template <std::floating_point T>
struct Affine {
  T f{1};
  T b{0};

  static constexpr Affine identity() { return {T{1}, T{0}}; }
  friend constexpr bool operator==(const Affine&, const Affine&) = default;
};

/// Raw 2x2 product `later * earlier` (apply `earlier` first).
template <std::floating_point T>
constexpr Mobius<T> mobius_product(const Mobius<T>& later, const Mobius<T>& earlier) {
  return {later.alpha * earlier.alpha + later.beta * earlier.gamma,
          later.alpha * earlier.beta + later.beta * earlier.delta,
          later.gamma * earlier.alpha + later.delta * earlier.gamma,
          later.gamma * earlier.beta + later.delta * earlier.delta};
}

/// Divides all four coefficients by the largest magnitude. The map is
/// unchanged; only the representative is rescaled.
template <std::floating_point T>
constexpr Mobius<T> mobius_normalize(const Mobius<T>& m) {
  const T scale = std::max(std::max(std::abs(m.alpha), std::abs(m.beta)),
                           std::max(std::abs(m.gamma), std::abs(m.delta)));
  if (!(scale > T{0})) return m;
  const T inv = T{1} / scale;
  return {m.alpha * inv, m.beta * inv, m.gamma * inv, m.delta * inv};
}

/// Composition `later ∘ earlier`, renormalized.
template <std::floating_point T>
constexpr Mobius<T> mobius_combine(const Mobius<T>& later, const Mobius<T>& earlier) {
  return mobius_normalize(mobius_product(later, earlier));
}

template <std::floating_point T>
T mobius_apply(const Mobius<T>& m, T lam) {
  const T den = m.gamma * lam + m.delta;
  if (!(den > T{0})) {
    throw DomainError("mobius_apply: non-positive denominator " + std::to_string(den));
  }
  return (m.alpha * lam + m.beta) / den;
}

template <std::floating_point T>
constexpr Affine<T> affine_combine(const Affine<T>& later, const Affine<T>& earlier) {
  return {later.f * earlier.f, later.f * earlier.b + later.b};
}

template <std::floating_point T>
constexpr T affine_apply(const Affine<T>& e, T x) {
  return e.f * x + e.b;
}

/// Lane-block combine: out[l] = later[l] ∘ earlier[l].
template <typename Elem, typename Combine>
void combine_lanes(std::span<const Elem> later, std::span<const Elem> earlier, std::span<Elem> out,
                   Combine&& combine) {
  if (later.size() != earlier.size() || out.size() != later.size()) {
    throw std::invalid_argument("combine_lanes: lane shape mismatch (" + std::to_string(later.size()) +
                                " vs " + std::to_string(earlier.size()) + ")");
  }
  for (std::size_t l = 0; l < out.size(); ++l) out[l] = combine(later[l], earlier[l]);
}

template <std::floating_point T>
void mobius_combine(std::span<const Mobius<T>> later, std::span<const Mobius<T>> earlier,
                    std::span<Mobius<T>> out) {
  combine_lanes(later, earlier, out, [](const Mobius<T>& a, const Mobius<T>& b) { return mobius_combine(a, b); });
}

template <std::floating_point T>
void affine_combine(std::span<const Affine<T>> later, std::span<const Affine<T>> earlier,
                    std::span<Affine<T>> out) {
  combine_lanes(later, earlier, out, [](const Affine<T>& a, const Affine<T>& b) { return affine_combine(a, b); });
}

enum class ScanMode { sequential, parallel };

inline const char* to_string(ScanMode mode) {
  return mode == ScanMode::sequential ? "sequential" : "parallel";
}

inline ScanMode parse_scan_mode(const std::string& name) {
  if (name == "sequential") return ScanMode::sequential;
  if (name == "parallel") return ScanMode::parallel;
  throw std::invalid_argument("unknown scan mode '" + name + "' (expected sequential|parallel)");
}

struct ScanPlan {
  std::size_t length = 1;  // T
  std::size_t lanes = 1;   // L
  ScanMode mode = ScanMode::parallel;
  // Worker threads for lane blocks in parallel mode; 0 means hardware concurrency.
  std::size_t threads = 0;
};

/// Instrumentation for the depth property.
struct ScanStats {
  std::size_t rounds = 0;    // dependent passes over the time axis
  std::size_t combines = 0;  // per-lane combine invocations
};

namespace detail {

inline void validate(const ScanPlan& plan, std::size_t size) {
  if (plan.length == 0 || plan.lanes == 0) throw std::invalid_argument("inclusive_scan: empty input");
  if (size != plan.length * plan.lanes) {
    throw std::invalid_argument("inclusive_scan: element count " + std::to_string(size) +
                                " does not match plan " + std::to_string(plan.length) + "x" +
                                std::to_string(plan.lanes));
  }
}

// row(i) <- row(i) ∘ row(j) for lanes [lo, hi)
template <typename Elem, typename Combine>
inline void fold_row(Elem* data, std::size_t lanes, std::size_t i, std::size_t j, std::size_t lo,
                     std::size_t hi, Combine& combine) {
  Elem* dst = data + i * lanes;
  const Elem* src = data + j * lanes;
  for (std::size_t l = lo; l < hi; ++l) dst[l] = combine(dst[l], src[l]);
}

template <typename Elem, typename Combine>
void sequential_fold(Elem* data, std::size_t length, std::size_t lanes, std::size_t lo, std::size_t hi,
                     Combine& combine) {
  for (std::size_t t = 1; t < length; ++t) fold_row(data, lanes, t, t - 1, lo, hi, combine);
}

// Brent-Kung inclusive scan: up-sweep builds power-of-two partial products,
// down-sweep fills the remaining prefixes. Valid for any length.
template <typename Elem, typename Combine>
void brent_kung(Elem* data, std::size_t length, std::size_t lanes, std::size_t lo, std::size_t hi,
                Combine& combine) {
  std::size_t stride = 1;
  for (; stride < length; stride *= 2) {
    for (std::size_t i = 2 * stride - 1; i < length; i += 2 * stride) {
      fold_row(data, lanes, i, i - stride, lo, hi, combine);
    }
  }
  for (stride /= 2; stride >= 1; stride /= 2) {
    for (std::size_t i = 3 * stride - 1; i < length; i += 2 * stride) {
      fold_row(data, lanes, i, i - stride, lo, hi, combine);
    }
  }
}

inline ScanStats brent_kung_stats(std::size_t length, std::size_t lanes) {
  ScanStats stats;
  std::size_t stride = 1;
  for (; stride < length; stride *= 2) {
    std::size_t count = 0;
    for (std::size_t i = 2 * stride - 1; i < length; i += 2 * stride) ++count;
    if (count) ++stats.rounds;
    stats.combines += count * lanes;
  }
  for (stride /= 2; stride >= 1; stride /= 2) {
    std::size_t count = 0;
    for (std::size_t i = 3 * stride - 1; i < length; i += 2 * stride) ++count;
    if (count) ++stats.rounds;
    stats.combines += count * lanes;
  }
  return stats;
}

}  // namespace detail

/// In-place inclusive scan: after the call, element (t, l) holds
/// e(t, l) ∘ e(t-1, l) ∘ ... ∘ e(0, l). `combine(later, earlier)` must be
/// associative. Sequential mode is the reference left fold; parallel mode is
/// a Brent-Kung schedule with lane blocks spread over worker threads. Output
/// is independent of the thread count.
template <typename Elem, typename Combine>
ScanStats inclusive_scan(std::span<Elem> elements, const ScanPlan& plan, Combine combine) {
  detail::validate(plan, elements.size());
  const std::size_t length = plan.length;
  const std::size_t lanes = plan.lanes;
  Elem* data = elements.data();

  if (plan.mode == ScanMode::sequential) {
    detail::sequential_fold(data, length, lanes, 0, lanes, combine);
    return {length - 1, (length - 1) * lanes};
  }

  std::size_t threads = plan.threads ? plan.threads : std::max(1u, std::thread::hardware_concurrency());
  // Blocks below this many lanes are not worth a thread.
  constexpr std::size_t kMinLanesPerThread = 64;
  threads = std::clamp<std::size_t>(lanes / kMinLanesPerThread, 1, threads);
  if (threads == 1) {
    detail::brent_kung(data, length, lanes, 0, lanes, combine);
  } else {
    std::vector<std::jthread> pool;
    pool.reserve(threads);
    const std::size_t block = (lanes + threads - 1) / threads;
    for (std::size_t w = 0; w < threads; ++w) {
      const std::size_t lo = w * block;
      const std::size_t hi = std::min(lanes, lo + block);
      if (lo >= hi) break;
      pool.emplace_back([=]() mutable { detail::brent_kung(data, length, lanes, lo, hi, combine); });
    }
  }
  return detail::brent_kung_stats(length, lanes);
}

template <std::floating_point T>
ScanStats mobius_scan(std::span<Mobius<T>> elements, const ScanPlan& plan) {
  return inclusive_scan(elements, plan, [](const Mobius<T>& a, const Mobius<T>& b) { return mobius_combine(a, b); });
}

template <std::floating_point T>
ScanStats affine_scan(std::span<Affine<T>> elements, const ScanPlan& plan) {
  return inclusive_scan(elements, plan, [](const Affine<T>& a, const Affine<T>& b) { return affine_combine(a, b); });
}

}  // namespace kla::scan
