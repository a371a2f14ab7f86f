#pragma once

#include <stdexcept>
#include <string>

namespace cktgen {

// Every error raised by the library derives from Error and carries a short
// machine-readable category used by the CLI for its exit code.
class Error : public std::runtime_error {
 public:
  Error(std::string category, const std::string& what)
      : std::runtime_error(what), category_(std::move(category)) {}

  const std::string& category() const noexcept { return category_; }

 private:
  std::string category_;
};

class ArgumentError : public Error {
 public:
  explicit ArgumentError(const std::string& what) : Error("argument", what) {}
};

class CapacityError : public Error {
 public:
  explicit CapacityError(const std::string& what) : Error("capacity", what) {}
};

class ParseError : public Error {
 public:
  ParseError(const std::string& what, long line)
      : Error("parse", "line " + std::to_string(line) + ": " + what), line_(line) {}

  long line() const noexcept { return line_; }

 private:
  long line_;
};

class SchemaError : public Error {
 public:
  explicit SchemaError(const std::string& what) : Error("schema", what) {}
};

class NumericError : public Error {
 public:
  explicit NumericError(const std::string& what) : Error("numeric", what) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error("io", what) {}
};

class ProfileMismatchError : public Error {
 public:
  explicit ProfileMismatchError(const std::string& what) : Error("profile", what) {}
};

}  // namespace cktgen
