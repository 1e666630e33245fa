#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace depthfuse::cli {

enum ExitCode : int { kOk = 0, kUsage = 1, kIo = 2, kNumerical = 3 };

/// Runs the command line `args` (args[0] is the program name). Normal
/// output goes to `out`, warnings and errors to `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace depthfuse::cli
