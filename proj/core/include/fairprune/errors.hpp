#pragma once

#include <stdexcept>
#include <string>

namespace fairprune {

// Error taxonomy shared by every module. The CLI maps these onto exit codes:
// ConfigError -> 2, DataError -> 3, NumericError -> 4, everything else -> 1.

// Shape mismatch between tensors/layers; message names both shapes.
class DimensionError : public std::runtime_error {
 public:
  explicit DimensionError(const std::string& what) : std::runtime_error(what) {}
};

// Input outside a function's mathematical domain (log of non-positive, ...).
class DomainError : public std::runtime_error {
 public:
  explicit DomainError(const std::string& what) : std::runtime_error(what) {}
};

// API misuse: violated precondition that is not a data or shape problem.
class ContractError : public std::runtime_error {
 public:
  explicit ContractError(const std::string& what) : std::runtime_error(what) {}
};

// Malformed or empty datasets, files, checkpoints.
class DataError : public std::runtime_error {
 public:
  explicit DataError(const std::string& what) : std::runtime_error(what) {}
};

// Bad experiment configuration.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

// NaN/Inf produced by an operation that promises finite results.
class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

// All group importance totals vanished; callers fall back to magnitude.
class DegenerateImportanceError : public std::runtime_error {
 public:
  explicit DegenerateImportanceError(const std::string& what)
      : std::runtime_error(what) {}
};

}  // namespace fairprune
