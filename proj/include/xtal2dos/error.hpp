// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace xtal2dos {

/// Machine-readable error categories. The numeric values are shared with the
/// C API status codes in xtal2dos.h.
enum class ErrorCode : int {
  kInvalidArgument = 1,
  kDimension = 2,
  kDomain = 3,
  kValidation = 4,
  kConfig = 5,
  kIo = 6,
  kFormat = 7,
  kNumeric = 8,
  kInternal = 99,
};

const char* error_code_name(ErrorCode code) noexcept;

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(what), code_(code) {}
  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

class InvalidArgumentError : public Error {
 public:
  explicit InvalidArgumentError(const std::string& what) : Error(ErrorCode::kInvalidArgument, what) {}
};

// Shape mismatch inside the array engine.
class DimensionError : public Error {
 public:
  explicit DimensionError(const std::string& what) : Error(ErrorCode::kDimension, what) {}
};

// Input outside an operation's mathematical domain (log of 0, negative DoS, ...).
class DomainError : public Error {
 public:
  explicit DomainError(const std::string& what) : Error(ErrorCode::kDomain, what) {}
};

class ValidationError : public Error {
 public:
  explicit ValidationError(const std::string& what) : Error(ErrorCode::kValidation, what) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error(ErrorCode::kConfig, what) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error(ErrorCode::kIo, what) {}
};

class FormatError : public Error {
 public:
  explicit FormatError(const std::string& what) : Error(ErrorCode::kFormat, what) {}
};

class NumericError : public Error {
 public:
  explicit NumericError(const std::string& what) : Error(ErrorCode::kNumeric, what) {}
};

}  // namespace xtal2dos
