#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace pfnl {

inline constexpr const char* kToolVersion = "0.1.0";

// Process exit codes.
inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitIo = 3;
inline constexpr int kExitNumerical = 4;

// Runs one command. `args` excludes the program name. Normal output goes to
// `out`, diagnostics and (by default for stdout-only commands) the run
// manifest to `err`.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace pfnl
