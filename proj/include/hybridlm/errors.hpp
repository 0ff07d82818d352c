#pragma once

#include <stdexcept>
#include <string>

namespace hybridlm {

// Shape/argument mismatch in a tensor op or model surface. Messages name the
// op and the offending shapes.
class ShapeError : public std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Bad user-supplied configuration or CLI usage. Maps to exit code 2.
class ConfigError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Numeric failure at runtime (NaN loss, non-positive rates, ...). Exit code 3.
class NumericError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

// File/serialization failure (missing file, checksum mismatch). Exit code 3.
class IoError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace hybridlm
