#pragma once

#include <stdexcept>
#include <string>

namespace gflow {

/// Input violates a mathematical precondition (zero quaternion, singular covariance...).
class DegenerateInput : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Caller broke an API contract (mismatched dimensions, out-of-range index).
class ContractError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Malformed or truncated file.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Configuration could not be parsed or contains unknown keys.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Optimization produced a non-finite loss.
class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace gflow
