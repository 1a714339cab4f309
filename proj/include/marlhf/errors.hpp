#pragma once

#include <stdexcept>
#include <string>

namespace marlhf {

// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// An operation received an empty response, episode or dataset.
class EmptyInputError : public Error {
 public:
  using Error::Error;
};

// Rule or scheme parameters violate their invariants.
class InvalidArgumentError : public Error {
 public:
  using Error::Error;
};

// Array lengths disagree (segment count vs. advantages, values vs. mask...).
class ShapeError : public Error {
 public:
  using Error::Error;
};

// A configuration key or value is invalid. `key()` names the offending key.
class ConfigError : public Error {
 public:
  ConfigError(std::string key, const std::string& message)
      : Error("config key '" + key + "': " + message), key_(std::move(key)) {}
  const std::string& key() const { return key_; }

 private:
  std::string key_;
};

// A loss or gradient became NaN/Inf.
class NonFiniteError : public Error {
 public:
  using Error::Error;
};

}  // namespace marlhf
