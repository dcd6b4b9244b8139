#pragma once

#include <stdexcept>
#include <string>

namespace clove {

/// Shape or extent mismatch between operands.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Caller violated an API precondition (non-scalar loss, consumed tape, ...).
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// A forward or update produced NaN/Inf.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed configuration or unknown key.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Unreadable or corrupt input data (checkpoints, CSV, images).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace clove
