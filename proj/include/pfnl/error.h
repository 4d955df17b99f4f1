#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace pfnl {

// Base of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shape or size mismatch between operands.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Zero-norm vector, all-zero weights and similar inputs that have no
// well-defined result.
class DegenerateInputError : public Error {
 public:
  using Error::Error;
};

// Malformed file contents. `offset` is the byte position where parsing failed.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::uint64_t offset)
      : Error(what + " (at byte offset " + std::to_string(offset) + ")"),
        offset_(offset) {}
  std::uint64_t offset() const { return offset_; }

 private:
  std::uint64_t offset_;
};

// Cannot open, read or write a file.
class IoError : public Error {
 public:
  using Error::Error;
};

// Well-formed container holding invalid values (non-finite entries, bad
// class indices).
class DataError : public Error {
 public:
  using Error::Error;
};

class SamplingError : public Error {
 public:
  using Error::Error;
};

class MiningError : public Error {
 public:
  using Error::Error;
};

// Invalid configuration value or argument.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Non-finite loss or gradient during optimization.
class NumericalError : public Error {
 public:
  using Error::Error;
};

}  // namespace pfnl
