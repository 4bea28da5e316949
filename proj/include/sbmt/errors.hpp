#pragma once

#include <stdexcept>
#include <string>

namespace sbmt {

// Incompatible matrix or tensor shapes.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// A value outside the mathematical domain of an operation.
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// Malformed user input: token ids, sequence files, config keys.
class InputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A trace or gradient buffer that does not belong to the object it is used with.
class ConsistencyError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Requested information was not collected (e.g. op counters disabled).
class UnavailableError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Training produced a NaN or infinite loss. what() carries the diagnostic dump.
class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace sbmt
