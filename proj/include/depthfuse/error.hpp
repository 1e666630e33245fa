#pragma once

#include <stdexcept>
#include <string>

namespace depthfuse {

/// Base class of every error raised by the toolkit.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor or image dimensions do not agree.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A NaN/Inf was produced, or a numerical precondition failed.
class NumericalError : public Error {
 public:
  using Error::Error;
};

/// A value lies outside the range a format or operation can represent.
class RangeError : public Error {
 public:
  using Error::Error;
};

/// A file decoded but has the wrong layout (bit depth, channels, schema).
class FormatError : public Error {
 public:
  using Error::Error;
};

/// A file could not be opened, read or written.
class IoError : public Error {
 public:
  using Error::Error;
};

/// Input data failed validation (missing files, mismatched sizes, bad config).
class ValidationError : public Error {
 public:
  using Error::Error;
};

}  // namespace depthfuse
