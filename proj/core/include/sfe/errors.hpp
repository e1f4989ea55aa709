#pragma once

#include <stdexcept>
#include <string>

namespace sfe {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid or contradictory configuration. `key()` names the offending entry.
class ConfigError : public Error {
 public:
  ConfigError(std::string key, const std::string& message)
      : Error(key.empty() ? message : key + ": " + message), key_(std::move(key)) {}
  [[nodiscard]] const std::string& key() const { return key_; }

 private:
  std::string key_;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class DomainError : public Error {
 public:
  using Error::Error;
};

class IndexError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values produced by a network. `layer()` is -1 when the failing
/// stage is not a layer.
class NumericalError : public Error {
 public:
  NumericalError(const std::string& message, int layer = -1)
      : Error(layer >= 0 ? message + " (layer " + std::to_string(layer) + ")" : message),
        layer_(layer) {}
  [[nodiscard]] int layer() const { return layer_; }

 private:
  int layer_;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace sfe
