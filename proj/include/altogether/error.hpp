#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace altogether {

enum class ErrorKind {
  kParse,
  kIngestion,
  kNotFound,
  kSequencing,
  kValidation,
  kFormat,
  kLength,
  kConfig,
  kDomain,
  kShape,
  kIo,
  kState,
  kConflict,
  kPrecondition,
  kDependency,
  kRange,
  kAlignment,
  kDegenerate,
  kEmptyRound,
  kTraining,
};

std::string_view error_kind_name(ErrorKind kind);

// Every failure raised by the library carries a kind so that the CLI and the
// HTTP layer can map it to an exit code / status without string matching.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }
  std::string_view code() const noexcept { return error_kind_name(kind_); }

 private:
  ErrorKind kind_;
};

}  // namespace altogether
