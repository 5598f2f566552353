#pragma once

#include <iosfwd>

namespace altogether::cli {

enum ExitCode : int {
  kOk = 0,
  kValidationFailure = 1,
  kIoFailure = 2,
  kInternalFailure = 3,
};

// Entry point of the `altogether` tool. Data goes to `out`, logs and
// diagnostics to `err`.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace altogether::cli
