#pragma once

#include <stdexcept>
#include <string>

namespace c2fl {

/// Invalid configuration or mismatched shapes. Maps to CLI exit code 2.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

/// Missing files, unreadable payloads. Maps to CLI exit code 3.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A file was readable but violates its format contract.
class FormatError : public IoError {
 public:
  using IoError::IoError;
};

/// NaN or infinity showed up where finite values are required. Exit code 4.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace c2fl
