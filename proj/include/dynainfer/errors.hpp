#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace dynainfer {

/// Base of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A computation produced or consumed a non-finite value.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Malformed or unsupported file contents.
class FormatError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class FileError : public Error {
 public:
  using Error::Error;
};

/// Attempt to read environment labels through a sealed view.
class PermissionError : public Error {
 public:
  using Error::Error;
};

class IndexError : public Error {
 public:
  using Error::Error;
};

class ArgumentError : public Error {
 public:
  using Error::Error;
};

class RankDeficiencyError : public Error {
 public:
  RankDeficiencyError(const std::string& what, std::size_t env)
      : Error(what), env_(env) {}
  std::size_t env() const noexcept { return env_; }

 private:
  std::size_t env_;
};

/// Adaptive step size fell below the representable floor.
class StiffnessError : public Error {
 public:
  StiffnessError(const std::string& what, double time)
      : Error(what), time_(time) {}
  double time() const noexcept { return time_; }

 private:
  double time_;
};

}  // namespace dynainfer
