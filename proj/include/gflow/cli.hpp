#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace gflow::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitNumerical = 2;

/// Runs one command line (args[0] is the program name). Reports go to `out`,
/// errors to `err`; returns the process exit status.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace gflow::cli
