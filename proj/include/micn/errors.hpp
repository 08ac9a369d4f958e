#pragma once

#include <stdexcept>

namespace micn {

/// A file that is not in the expected format.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// The file ends before the header says it should.
class TruncatedError : public FormatError {
 public:
  using FormatError::FormatError;
};

/// The file was written by an incompatible format version.
class VersionError : public FormatError {
 public:
  using FormatError::FormatError;
};

/// A stored tensor does not fit the model it is loaded into.
class ShapeMismatchError : public FormatError {
 public:
  using FormatError::FormatError;
};

}  // namespace micn
