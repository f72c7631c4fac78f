#pragma once

#include <stdexcept>
#include <string>

namespace refseg {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Incompatible extents, ranks or axes.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Argument outside the domain an op is defined on (e.g. negative attention weights).
class DomainError : public Error {
 public:
  using Error::Error;
};

// A NaN or Inf appeared in an op's output.
class NumericError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

class StateError : public Error {
 public:
  using Error::Error;
};

class GenerationError : public Error {
 public:
  using Error::Error;
};

}  // namespace refseg
