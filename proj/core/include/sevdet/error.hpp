#pragma once

#include <stdexcept>
#include <string>

namespace sevdet {

/// Base for every error the library throws.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor or layer shape disagreement. The message names expected vs actual.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Bad argument, configuration value, or violated precondition.
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

/// File system or decode failure; the message names the offending path.
class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace sevdet
