#pragma once

#include <stdexcept>
#include <string>

namespace stcnet {

// Bad arguments, shapes, configs or graph structure. CLI exit code 2.
class ArgumentError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public ArgumentError {
 public:
  using ArgumentError::ArgumentError;
};

class ConfigError : public ArgumentError {
 public:
  using ArgumentError::ArgumentError;
};

class StructuralError : public ArgumentError {
 public:
  using ArgumentError::ArgumentError;
};

// Malformed or corrupt files. CLI exit code 3.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Non-finite values where finite math is required. CLI exit code 4.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const NumericError*>(&e)) return 4;
  if (dynamic_cast<const FormatError*>(&e)) return 3;
  return 2;
}

}  // namespace stcnet
