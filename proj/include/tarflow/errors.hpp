#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace tarflow {

// Operand shapes do not conform (the message names both shapes).
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Argument outside a function's domain (log of non-positive, divide by zero).
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// A softmax row had no finite logit left after masking.
class DegenerateMaskError : public DomainError {
 public:
  using DomainError::DomainError;
};

// Invalid hyperparameter or configuration value.
class ParameterError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// exp(alpha) left the representable range during a flow transform.
class NumericalRangeError : public std::range_error {
 public:
  using std::range_error::range_error;
};

// Malformed input; the message ends with the byte offset of the bad field.
class ParseError : public std::runtime_error {
 public:
  explicit ParseError(const std::string& what)
      : std::runtime_error(what) {}
  ParseError(const std::string& what, std::size_t offset)
      : std::runtime_error(what + " (byte offset " + std::to_string(offset) + ")"),
        offset_(offset) {}

  std::size_t offset() const { return offset_; }

 private:
  std::size_t offset_ = 0;
};

}  // namespace tarflow
