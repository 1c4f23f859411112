#pragma once

#include <stdexcept>
#include <string>

namespace slim {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Operand extents do not agree with what an operation requires.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Invalid user-supplied configuration (config files, CLI arguments, plans).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Misuse of the differentiation tape (mixed tapes, released tapes, ...).
class TapeError : public Error {
 public:
  using Error::Error;
};

}  // namespace slim
