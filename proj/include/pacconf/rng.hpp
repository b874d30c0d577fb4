#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

#include <Eigen/Dense>

namespace pacconf {

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Deterministic 64-bit key for an ordered tuple of integers.
inline std::uint64_t stream_key(std::initializer_list<std::uint64_t> parts) {
  std::uint64_t h = 0x6a09e667f3bcc909ULL;
  for (auto p : parts) h = splitmix64(h ^ splitmix64(p));
  return h;
}

/// Independent generator for (seed, tag, index...).
inline Rng make_rng(std::initializer_list<std::uint64_t> parts) { return Rng(stream_key(parts)); }

/// Uniform index in [0, m) from a key, without drawing from a shared stream.
inline std::size_t keyed_index(std::uint64_t key, std::size_t m) {
  return static_cast<std::size_t>((static_cast<unsigned __int128>(splitmix64(key)) * m) >> 64);
}

inline Eigen::VectorXd standard_normal(Rng& rng, long n) {
  std::normal_distribution<double> dist(0.0, 1.0);
  Eigen::VectorXd v(n);
  for (long i = 0; i < n; ++i) v(i) = dist(rng);
  return v;
}

// Stream tags keep the different consumers of one experiment seed apart.
namespace stream {
inline constexpr std::uint64_t data = 1;
inline constexpr std::uint64_t base_model = 2;
inline constexpr std::uint64_t split = 3;
inline constexpr std::uint64_t prior_init = 4;
inline constexpr std::uint64_t prior_tune = 5;
inline constexpr std::uint64_t posterior = 6;
inline constexpr std::uint64_t predictor = 7;
inline constexpr std::uint64_t evaluation = 8;
inline constexpr std::uint64_t corruption = 9;
inline constexpr std::uint64_t learned = 10;
}  // namespace stream

}  // namespace pacconf
