#pragma once

#include <stdexcept>
#include <string>

namespace laneformer {

/// Base class for all errors raised by this library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Incompatible tensor or matrix shapes; the message names both shapes.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Malformed input text (lane files, detection files, configs). Carries the
/// offending line number when one is known.
class ParseError : public Error {
 public:
  explicit ParseError(const std::string& msg, long line = -1)
      : Error(line >= 0 ? "line " + std::to_string(line) + ": " + msg : msg),
        line_(line) {}

  long line() const { return line_; }

 private:
  long line_;
};

/// Filesystem-level failure (missing file, unwritable directory).
class IoError : public Error {
 public:
  using Error::Error;
};

/// A computation produced NaN or infinity; the message names the operation.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Raised when a training run must stop (non-finite loss). A diagnostic
/// snapshot has been written before this is thrown.
class TrainAbort : public Error {
 public:
  using Error::Error;
};

}  // namespace laneformer
