#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace magrecon::cli {

/// Exit codes of the command-line tool.
inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitIo = 3;
inline constexpr int kExitNonconvergence = 4;
inline constexpr int kExitCertificate = 5;

/// Relative output paths are resolved against this variable when it is set.
inline constexpr const char* kOutputRootEnv = "MAGRECON_OUTPUT_ROOT";

/// Runs one invocation; `args` excludes the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace magrecon::cli
