#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace offlang {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed input record. line is 1-based, 0 when unknown.
class ParseError : public Error {
 public:
  ParseError(std::size_t line, const std::string& what)
      : Error(line ? "line " + std::to_string(line) + ": " + what : what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

class ValidationError : public Error {
 public:
  using Error::Error;
};

// Usage or configuration problem (CLI exit status 2).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Non-finite values during forward passes or training.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace offlang
