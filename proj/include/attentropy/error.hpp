#pragma once

#include <stdexcept>
#include <string>

namespace attentropy {

// Base of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid configuration or arguments. The CLI maps this to exit code 2.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Filesystem failures.
class IoError : public Error {
 public:
  using Error::Error;
};

// Shape or size disagreement between operands.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Violated numeric precondition (negative probability, single-class labels...).
class DomainError : public Error {
 public:
  using Error::Error;
};

// Malformed file contents. `field()` names the offending header field or
// section ("magic", "descr", "shape", "payload", ...).
class FormatError : public Error {
 public:
  enum class Kind {
    kMalformedHeader,
    kUnsupportedDtype,
    kTruncatedPayload,
    kIllegalValue,
  };

  FormatError(Kind kind, std::string field, const std::string& message)
      : Error(message), kind_(kind), field_(std::move(field)) {}

  Kind kind() const { return kind_; }
  const std::string& field() const { return field_; }

 private:
  Kind kind_;
  std::string field_;
};

}  // namespace attentropy
