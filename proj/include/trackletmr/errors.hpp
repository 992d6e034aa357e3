#pragma once

#include <stdexcept>
#include <string>

namespace tmr {

struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DimMismatch : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct EmptyRowError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct NonFiniteError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DivergenceError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Query text that does not conform to the clause grammar. `position` is the
// zero-based token index where parsing failed.
struct GrammarError : std::runtime_error {
  GrammarError(const std::string& msg, std::size_t position)
      : std::runtime_error(msg + " (token " + std::to_string(position) + ")"),
        position(position) {}
  std::size_t position;
};

struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace tmr
