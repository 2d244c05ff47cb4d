#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace cvm {

// Base of every error the library throws.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor or layer shapes do not line up.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// An operation was called in a state where its precondition does not hold.
class StateError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf or a zero norm where a nonzero one is required.
class NumericError : public Error {
 public:
  using Error::Error;
};

class RangeError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

// A generator was asked for geometry it cannot produce.
class ConstructionError : public Error {
 public:
  using Error::Error;
};

// Input is valid in shape but admits no meaningful result (e.g. no negative class).
class DegenerateInputError : public Error {
 public:
  using Error::Error;
};

// Malformed file; carries the byte offset where parsing failed.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::uint64_t offset)
      : Error(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}

  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::uint64_t offset_;
};

}  // namespace cvm
