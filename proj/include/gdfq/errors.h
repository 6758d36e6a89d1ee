// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace gdfq {

/// Root of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A documented precondition was violated by the caller.
class ContractError : public Error {
 public:
  using Error::Error;
};

class IndexError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf where a finite value is required, or a diverged training run.
class NumericError : public Error {
 public:
  using Error::Error;
};

class RangeError : public Error {
 public:
  using Error::Error;
};

class DegenerateRangeError : public Error {
 public:
  using Error::Error;
};

class BitwidthError : public Error {
 public:
  using Error::Error;
};

/// Model has no batch-norm layers to read statistics from.
class BnsUnavailableError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class FileError : public Error {
 public:
  using Error::Error;
};

class UnsupportedTaskError : public Error {
 public:
  using Error::Error;
};

}  // namespace gdfq
