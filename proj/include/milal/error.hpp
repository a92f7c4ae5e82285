#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace milal {

/// Base class for every error raised by the library. The `exit_code` is the
/// process status the command-line tool reports for this error family.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what, int exit_code = 4)
      : std::runtime_error(what), exit_code_(exit_code) {}
  int exit_code() const noexcept { return exit_code_; }

 private:
  int exit_code_;
};

// Shapes of operands do not conform to a primitive's rules.
class DimensionError : public Error {
 public:
  explicit DimensionError(const std::string& what) : Error(what, 3) {}
};

// Caller broke an API precondition (programming error).
class ContractError : public Error {
 public:
  explicit ContractError(const std::string& what) : Error(what, 4) {}
};

// Malformed data handed to an operation (bad label, empty bag, ...).
class InputError : public Error {
 public:
  explicit InputError(const std::string& what) : Error(what, 3) {}
};

// A numeric hyper-parameter is out of its admissible range.
class ParameterError : public Error {
 public:
  explicit ParameterError(const std::string& what) : Error(what, 2) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error(what, 2) {}
};

class MissingAnnotation : public InputError {
 public:
  explicit MissingAnnotation(const std::string& what) : InputError(what) {}
};

// Cross-file inconsistency: duplicate ids, label mismatch, resume drift.
class IntegrityError : public Error {
 public:
  explicit IntegrityError(const std::string& what) : Error(what, 3) {}
};

class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::uint64_t offset)
      : Error(what + " (at byte offset " + std::to_string(offset) + ")", 3),
        offset_(offset) {}
  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::uint64_t offset_;
};

class NumericError : public Error {
 public:
  explicit NumericError(const std::string& what) : Error(what, 4) {}
};

}  // namespace milal
