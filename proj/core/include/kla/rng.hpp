#pragma once

// Counter-based random numbers: every draw is a pure function of
// (key, counter), so any single sequence or noise sample can be regenerated
// in isolation. Keys are derived by hashing a path of integers.

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numbers>
#include <random>

namespace kla::rng {

constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Hashes an ordered path of integers into a 64-bit key.
constexpr std::uint64_t derive_key(std::initializer_list<std::uint64_t> path) {
  std::uint64_t h = 0x6a09e667f3bcc909ULL;
  for (const std::uint64_t v : path) h = splitmix64(h ^ splitmix64(v));
  return h;
}

/// Uniform in (0, 1), never exactly 0 or 1.
inline double uniform(std::uint64_t key, std::uint64_t counter) {
  const std::uint64_t bits = splitmix64(key ^ splitmix64(counter));
  return (static_cast<double>(bits >> 11) + 0.5) * 0x1.0p-53;
}

/// Standard normal via Box-Muller on two counter draws.
inline double normal(std::uint64_t key, std::uint64_t counter) {
  const double u1 = uniform(key, 2 * counter);
  const double u2 = uniform(key, 2 * counter + 1);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

/// Standard engine seeded from a derived key, for sequential draws.
inline std::mt19937_64 engine(std::initializer_list<std::uint64_t> path) {
  return std::mt19937_64(derive_key(path));
}

}  // namespace kla::rng
