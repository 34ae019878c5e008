#pragma once

#include <stdexcept>
#include <string>

namespace gcm {

// Base for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Mismatched tensor dimensions.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Caller passed an argument outside an operation's domain.
class InputError : public Error {
 public:
  using Error::Error;
};

// A record or file violates a structural invariant.
class ValidationError : public Error {
 public:
  using Error::Error;
};

// Malformed file content. Carries the 1-based line number when known.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t line = 0)
      : Error(line ? "line " + std::to_string(line) + ": " + what : what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

// Optimization failed to converge, or diverged.
class TrainingError : public Error {
 public:
  using Error::Error;
};

// API misuse, e.g. backward without a recorded forward.
class UsageError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

}  // namespace gcm
