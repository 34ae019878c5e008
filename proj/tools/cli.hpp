#pragma once

#include <string>
#include <vector>

namespace gcm::cli {

enum ExitCode : int { kOk = 0, kUsage = 1, kValidation = 2, kRuntime = 3 };

// Parses and runs one subcommand; returns the process exit code.
int run(int argc, const char* const* argv);
// Arguments after the program name.
int run(const std::vector<std::string>& args);

}  // namespace gcm::cli
