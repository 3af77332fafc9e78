#pragma once

#include <stdexcept>
#include <string>

namespace pz {

// Error categories map onto CLI exit codes (see cli.hpp).
enum class ErrorKind {
  kShape,
  kValue,
  kFormat,
  kIo,
  kConfig,
  kNumeric,
  kMissingArtifact,
  kUsage,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& what) : Error(ErrorKind::kShape, what) {}
};

class ValueError : public Error {
 public:
  explicit ValueError(const std::string& what) : Error(ErrorKind::kValue, what) {}
};

class FormatError : public Error {
 public:
  explicit FormatError(const std::string& what) : Error(ErrorKind::kFormat, what) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error(ErrorKind::kIo, what) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error(ErrorKind::kConfig, what) {}
};

class NumericError : public Error {
 public:
  explicit NumericError(const std::string& what) : Error(ErrorKind::kNumeric, what) {}
};

class MissingArtifactError : public Error {
 public:
  explicit MissingArtifactError(const std::string& what)
      : Error(ErrorKind::kMissingArtifact, what) {}
};

class UsageError : public Error {
 public:
  explicit UsageError(const std::string& what) : Error(ErrorKind::kUsage, what) {}
};

}  // namespace pz
