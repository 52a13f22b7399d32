#pragma once

#include <stdexcept>
#include <string>

namespace bisup {

// Exception taxonomy mirrored by the C API status codes: config errors are
// caller mistakes (bad spec string, invalid dimensions), numeric errors are
// runtime failures of the math (NaN loss, non-convergence), io errors are
// file-level problems. Anything else escaping the library is internal.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error(what) {}
};

class ShapeError : public ConfigError {
 public:
  explicit ShapeError(const std::string& what) : ConfigError(what) {}
};

class NumericError : public Error {
 public:
  explicit NumericError(const std::string& what) : Error(what) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error(what) {}
};

}  // namespace bisup
