#pragma once

#include <stdexcept>
#include <string>

namespace xbnn {

// Error taxonomy mirrors the CLI exit codes: config = 2, data = 3, numeric = 4.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

class DataError : public std::runtime_error {
 public:
  explicit DataError(const std::string& what) : std::runtime_error(what) {}
};

class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace xbnn
