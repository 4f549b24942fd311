#pragma once

#include <stdexcept>
#include <string>

namespace pcam {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid argument value (non-positive voxel size, empty input, ...).
class ParameterError : public Error {
 public:
  using Error::Error;
};

/// Operand sizes or tensor shapes do not agree.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf produced, or a normalizer collapsed below its floor.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Procrustes weights sum to zero.
class DegenerateWeightsError : public Error {
 public:
  using Error::Error;
};

/// Weighted cross-covariance has rank < 3.
class RankDeficiencyError : public Error {
 public:
  using Error::Error;
};

/// An operation was invoked in a map mode it does not support.
class ModeError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed point-cloud, meta or checkpoint file. Carries the 1-based line
/// number when one applies (0 otherwise).
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t line = 0)
      : Error(line ? what + " (line " + std::to_string(line) + ")" : what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class GenerationError : public Error {
 public:
  using Error::Error;
};

class CheckpointError : public Error {
 public:
  using Error::Error;
};

}  // namespace pcam
