#pragma once

#include <string>
#include <vector>

namespace tmr {

struct NamedCheck {
  std::string name;
  double max_rel_err = 0.0;
};

// Central-difference checks in f64 for every tape operation, on small random
// inputs kept away from non-smooth points. Deterministic for a fixed seed.
std::vector<NamedCheck> op_gradient_suite(std::uint64_t seed);

// Finite-difference check of the full training objective (relational variant
// with an active frame branch) against every model parameter, on a model small
// enough to difference coordinate-by-coordinate.
NamedCheck end_to_end_gradient_check(std::uint64_t seed);

}  // namespace tmr
