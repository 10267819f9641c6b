#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

#include <Eigen/Core>

namespace wsvamp {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

namespace rng {

// splitmix64 finalizer; all stream derivation goes through this.
inline std::uint64_t mix(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Derives an independent substream seed from a master seed and a path of
/// counters, so any sub-computation can be reproduced in isolation.
inline std::uint64_t derive(std::uint64_t seed, std::initializer_list<std::uint64_t> path) {
  std::uint64_t s = mix(seed);
  for (std::uint64_t p : path) s = mix(s ^ mix(p));
  return s;
}

inline std::mt19937_64 engine(std::uint64_t seed, std::initializer_list<std::uint64_t> path = {}) {
  return std::mt19937_64(derive(seed, path));
}

inline Vec gaussian(int n, std::mt19937_64& g, double stddev = 1.0) {
  std::normal_distribution<double> d(0.0, stddev);
  Vec v(n);
  for (int k = 0; k < n; ++k) v[k] = d(g);
  return v;
}

inline Vec rademacher(int n, std::mt19937_64& g) {
  Vec v(n);
  for (int k = 0; k < n; ++k) v[k] = (g() & 1ULL) ? 1.0 : -1.0;
  return v;
}

}  // namespace rng
}  // namespace wsvamp
