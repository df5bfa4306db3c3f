#pragma once

#include <stdexcept>
#include <string>

namespace brewlab {

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A NaN or Inf appeared in a recorded value. The message names the node.
class NonFiniteError : public Error {
 public:
  using Error::Error;
};

/// Misuse of a computation graph (non-scalar output, consumed graph, ...).
class GraphError : public Error {
 public:
  using Error::Error;
};

/// A cosine or norm was requested of a zero vector.
class DegenerateGradientError : public Error {
 public:
  using Error::Error;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration; the message starts with the offending field path.
class ConfigError : public Error {
 public:
  using Error::Error;
};

class ConstraintViolation : public Error {
 public:
  using Error::Error;
};

class DivergenceError : public Error {
 public:
  using Error::Error;
};

}  // namespace brewlab
