#pragma once

#include <stdexcept>
#include <string>

namespace pbl {

/// Base class of all errors raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed input documents, invalid parameter sets, bad arguments.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Truncated or unreadable files.
class IoError : public Error {
 public:
  using Error::Error;
};

/// Non-finite losses, singular geometry.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace pbl
