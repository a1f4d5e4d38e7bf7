#pragma once

#include <stdexcept>
#include <string>

namespace rsaforge {

// Base class for everything this library throws.
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

// Malformed byte streams: bad magic, unsupported version, garbled headers.
class FormatError : public Error {
public:
  using Error::Error;
};

// Stream ended before the declared payload was complete.
class TruncatedStreamError : public FormatError {
public:
  using FormatError::FormatError;
};

// Non-finite values or numeric arguments outside their domain.
class ValueError : public Error {
public:
  using Error::Error;
};

// Tensor shapes that do not line up.
class ShapeError : public Error {
public:
  using Error::Error;
};

// Statistically degenerate input (constant vector, flat RDM triangle).
// Kept distinct from ValueError so callers can tell "undefined correlation"
// apart from NaN contamination.
class DegenerateInputError : public Error {
public:
  using Error::Error;
};

// Bad command-line usage; the CLI maps this to exit code 2.
class UsageError : public Error {
public:
  using Error::Error;
};

} // namespace rsaforge
