#pragma once

#include <stdexcept>
#include <string>

namespace vila {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes do not conform to an operation's contract.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Input is mathematically degenerate (zero norm, constant series, ...).
class DegenerateError : public Error {
 public:
  using Error::Error;
};

/// A file or record does not follow its declared format.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Arguments violate a precondition that is not about shapes.
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

}  // namespace vila
