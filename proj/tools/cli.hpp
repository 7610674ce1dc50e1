#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace lyaprobe::cli {

enum ExitCode : int {
  kOk = 0,
  kFailure = 1,
  kConfigExit = 2,
  kIoExit = 3,
  kNumericalExit = 4,
  kUndefinedMetricExit = 5,
};

// Runs one command line (args excludes the program name). Data goes to
// `out`, diagnostics to `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace lyaprobe::cli
