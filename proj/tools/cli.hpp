#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace jbf::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitUsage = 2;

/// Runs the command line `args` (without the program name). Errors are
/// reported on `err` as one line "jbf: <kind>: <message>".
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace jbf::cli
