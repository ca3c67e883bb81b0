#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>

namespace gmflow {

// Draws built directly on the 64-bit engine output so that seeded runs
// reproduce across standard-library implementations.
inline double uniform01(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

inline double standard_normal(std::mt19937_64& rng) {
  double u1 = uniform01(rng);
  while (u1 <= 0.0) u1 = uniform01(rng);
  const double u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

}  // namespace gmflow
