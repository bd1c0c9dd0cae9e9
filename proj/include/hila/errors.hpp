#pragma once

#include <stdexcept>
#include <string>

namespace hila {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Incompatible tensor extents.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Patch/window geometry that does not tile the input.
class GeometryError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class ParseError : public Error {
 public:
  using Error::Error;
};

// Violated caller precondition (non-scalar backward root, mismatched stages, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

// Out-of-range values in user data (class ids, labels).
class DataError : public Error {
 public:
  using Error::Error;
};

}  // namespace hila
