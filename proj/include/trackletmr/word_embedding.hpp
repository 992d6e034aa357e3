#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "trackletmr/rng.hpp"

namespace tmr {

inline std::uint64_t fnv1a64(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (const char c : s) {
    h ^= static_cast<std::uint8_t>(c);
    h *= 1099511628211ull;
  }
  return h;
}

// Deterministic unit-norm embedding for a token; the same word maps to the
// same vector everywhere (generator semantics and runtime query features), so
// class identity survives serialization without a vocabulary file.
inline std::vector<float> token_embedding(const std::string& token, int dim) {
  Rng rng(fnv1a64(token));
  std::vector<float> v(static_cast<std::size_t>(dim));
  double norm_sq = 0.0;
  for (auto& x : v) {
    const double g = rng.normal();
    x = static_cast<float>(g);
    norm_sq += g * g;
  }
  const float inv = static_cast<float>(1.0 / std::sqrt(norm_sq > 0.0 ? norm_sq : 1.0));
  for (auto& x : v) x *= inv;
  return v;
}

}  // namespace tmr
