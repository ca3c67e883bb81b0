#pragma once

#include <stdexcept>
#include <string>

namespace gmflow {

// Base for every error raised by the library. `exit_code()` is what the CLI
// returns when the error escapes a subcommand.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
  virtual int exit_code() const { return 1; }
};

#define GMFLOW_DEFINE_ERROR(Name, Code)                          \
  class Name : public Error {                                    \
   public:                                                       \
    explicit Name(const std::string& what) : Error(what) {}      \
    int exit_code() const override { return Code; }              \
  };

// Usage and configuration problems.
GMFLOW_DEFINE_ERROR(ConfigError, 2)
GMFLOW_DEFINE_ERROR(DomainError, 2)
GMFLOW_DEFINE_ERROR(CheckpointError, 2)

// Data problems.
GMFLOW_DEFINE_ERROR(IoError, 3)
GMFLOW_DEFINE_ERROR(FormatError, 3)
GMFLOW_DEFINE_ERROR(EmptyDatasetError, 3)
GMFLOW_DEFINE_ERROR(InsufficientCandidatesError, 3)
GMFLOW_DEFINE_ERROR(IndexError, 3)
GMFLOW_DEFINE_ERROR(EmptyDomainError, 3)
GMFLOW_DEFINE_ERROR(DomainMismatchError, 3)
GMFLOW_DEFINE_ERROR(EmptyEvalError, 3)

// Numeric failures.
GMFLOW_DEFINE_ERROR(ShapeError, 4)
GMFLOW_DEFINE_ERROR(NumericsError, 4)

#undef GMFLOW_DEFINE_ERROR

}  // namespace gmflow
