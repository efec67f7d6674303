#pragma once

#include <stdexcept>
#include <string>

namespace qfactor {

/// Base class of every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A vector or matrix does not have the shape an operation requires.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Two networks that must share an architecture do not.
class ArchitectureMismatch : public Error {
 public:
  using Error::Error;
};

/// A gradient or loss became NaN/inf. Training aborts on this.
class NonFiniteError : public Error {
 public:
  using Error::Error;
};

/// An action index, parameter or table size is outside its allowed range.
class RangeError : public Error {
 public:
  using Error::Error;
};

/// Malformed checkpoint, payoff table or config file.
class ParseError : public Error {
 public:
  ParseError(const std::string& source, int line, const std::string& what)
      : Error(source + ":" + std::to_string(line) + ": " + what), line_(line) {}
  explicit ParseError(const std::string& what) : Error(what) {}

  int line() const { return line_; }

 private:
  int line_ = 0;
};

}  // namespace qfactor
