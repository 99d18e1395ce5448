// SPDX-License-Identifier: Apache-2.0
//
// Error taxonomy shared by every sakd module. The CLI maps these onto exit
// codes (config -> 1, numeric -> 2, check failure -> 3).

#pragma once

#include <stdexcept>
#include <string>

namespace sakd {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor shapes that do not fit the operation.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Invalid user-facing configuration (bad factor, unknown key, missing file).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values where finite ones are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

class IndexError : public Error {
 public:
  using Error::Error;
};

/// API misuse, e.g. backward() on a non-scalar.
class UsageError : public Error {
 public:
  using Error::Error;
};

/// A documented numeric invariant was violated by the caller's inputs.
class InvariantError : public Error {
 public:
  using Error::Error;
};

/// Checkpoint format problems: version mismatch, truncated arrays, wrong spec.
class IntegrityError : public Error {
 public:
  using Error::Error;
};

}  // namespace sakd
