#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace mednc {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor extents do not conform for the requested operation.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Invalid user configuration (bad rate, bad width, infeasible grouping, ...).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A caller violated an operation's precondition on values.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Operation invoked in the wrong lifecycle state (e.g. backward before forward).
class StateError : public Error {
 public:
  using Error::Error;
};

class LookupError : public Error {
 public:
  using Error::Error;
};

/// Input data is malformed or out of its documented range.
class DataError : public Error {
 public:
  using Error::Error;
};

/// Binary or text file does not conform to its format. Carries the byte offset.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::uint64_t offset)
      : Error(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}

  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::uint64_t offset_;
};

/// Training produced a non-finite loss.
class NumericError : public Error {
 public:
  NumericError(const std::string& what, int epoch) : Error(what), epoch_(epoch) {}
  int epoch() const noexcept { return epoch_; }

 private:
  int epoch_;
};

}  // namespace mednc
