// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace m3jepa {

/// Root of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf encountered, or a loss that stopped being finite.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// A vector with zero norm reached an operation that normalizes it.
class DegenerateVectorError : public NumericError {
 public:
  using NumericError::NumericError;
};

class PreconditionError : public Error {
 public:
  using Error::Error;
};

/// Config rejected before any compute starts.
class ValidationError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// Bad magic, unsupported version or malformed header.
class FormatError : public IoError {
 public:
  using IoError::IoError;
};

class TruncationError : public FormatError {
 public:
  using FormatError::FormatError;
};

}  // namespace m3jepa
