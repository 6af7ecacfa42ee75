#pragma once

#include <stdexcept>
#include <string>

namespace protodrift {

// Runtime/training failure (exit code 3 at the CLI boundary).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed configuration or input file (exit code 2 at the CLI boundary).
class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace protodrift
