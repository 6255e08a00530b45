#pragma once

#include <stdexcept>

namespace sdfatlas {

// Errors map to process exit codes: ConfigError -> 1, DataError -> 2,
// NumericalError -> 3.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace sdfatlas
