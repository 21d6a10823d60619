#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace hdril {

// Shape or width mismatch between operands.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class IndexError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

// Caller broke a documented precondition.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class LookupError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, std::size_t line)
      : std::runtime_error(line == 0 ? what : "line " + std::to_string(line) + ": " + what),
        line_(line) {}
  explicit ParseError(const std::string& what) : ParseError(what, 0) {}

  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

class NormalizationError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

class JointLimitError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

class GraspMissError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class WorkspaceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class GenerationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// An input file is absent or unreadable.
class MissingFileError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace hdril
