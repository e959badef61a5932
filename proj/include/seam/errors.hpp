#pragma once

#include <stdexcept>
#include <string>

namespace seam {

/// Root of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor shapes disagree; the message names the offending axes.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Input outside a function's numeric domain (e.g. log of a non-positive value).
class DomainError : public Error {
 public:
  using Error::Error;
};

class ParameterError : public Error {
 public:
  using Error::Error;
};

/// Misuse of the differentiation graph (second backward, non-scalar root).
class GraphError : public Error {
 public:
  using Error::Error;
};

/// Malformed file content; carries the byte offset where parsing stopped.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t offset)
      : Error(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// Dataset or run-directory content is missing or inconsistent.
class DataError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A non-finite value appeared where finite values are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace seam
