#pragma once

#include <stdexcept>
#include <string>

namespace cmtboost {

// Shape or rank violations on tensor operations.
class DimensionError : public std::runtime_error {
 public:
  explicit DimensionError(const std::string& msg) : std::runtime_error(msg) {}
};

// Out-of-domain scalar arguments (stride <= 0, p >= 1, ...).
class ParameterError : public std::runtime_error {
 public:
  explicit ParameterError(const std::string& msg) : std::runtime_error(msg) {}
};

// Invalid or inconsistent run/model configuration. Messages name the key.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Dataset ingestion problems (missing directories, unreadable files, empty sets).
class DataError : public std::runtime_error {
 public:
  explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

// Checkpoint format violations and incompatibilities.
class CheckpointError : public std::runtime_error {
 public:
  explicit CheckpointError(const std::string& msg) : std::runtime_error(msg) {}
};

// Numerically degenerate inputs (single-class curves, zero-variance PCA).
class DegeneracyError : public std::runtime_error {
 public:
  explicit DegeneracyError(const std::string& msg) : std::runtime_error(msg) {}
};

// Training loss became non-finite.
class DivergenceError : public std::runtime_error {
 public:
  explicit DivergenceError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace cmtboost
