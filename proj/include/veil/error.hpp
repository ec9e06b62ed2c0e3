#pragma once

#include <stdexcept>
#include <string>

namespace veil {

// Base class for all library errors.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Tensor dimension mismatches; messages name the offending axes.
struct ShapeError : Error {
  using Error::Error;
};

// Training-protocol violations, e.g. probing an unfrozen base.
struct ProtocolError : Error {
  using Error::Error;
};

// Dataset generation and on-disk I/O problems.
struct DataError : Error {
  using Error::Error;
};

// Invalid or inconsistent configuration values.
struct ConfigError : Error {
  using Error::Error;
};

}  // namespace veil
