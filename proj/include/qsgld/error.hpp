#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace qsgld {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Shape/dimension disagreement between operands.
class StructuralError : public Error {
public:
  using Error::Error;
};

/// Caller violated a documented precondition.
class UsageError : public Error {
public:
  using Error::Error;
};

/// Value outside the representable range (e.g. grid index overflow).
class RangeError : public Error {
public:
  using Error::Error;
};

/// NaN/Inf encountered where finite values are required.
class NumericalError : public Error {
public:
  using Error::Error;
};

/// Input data inconsistent with its declared meaning (bad label, ...).
class DataError : public Error {
public:
  using Error::Error;
};

/// Malformed file; carries the byte offset where parsing failed.
class FormatError : public Error {
public:
  FormatError(const std::string& what, std::size_t offset)
      : Error(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}

  std::size_t offset() const noexcept { return offset_; }

private:
  std::size_t offset_;
};

} // namespace qsgld
