#pragma once

#include <stdexcept>
#include <string>

namespace dtm {

/// Dimension or rank mismatch between tensors; message names the offending axes.
class ShapeError : public std::runtime_error {
 public:
  explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Non-finite values, degenerate batches, or other numeric failures.
class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Malformed files, unreadable paths, serialization failures.
class IoError : public std::runtime_error {
 public:
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Invalid or inconsistent configuration (schemas, train settings, CLI args).
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace dtm
