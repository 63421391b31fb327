#pragma once

#include <string>
#include <vector>

namespace svfm::cli {

// Parses and runs one command line (without the program name). Returns the
// process exit code: 0 success, 1 usage/config error, 2 data error,
// 3 numerical failure. Errors are reported as a JSON record on stderr.
int run_command(const std::vector<std::string>& args);

}  // namespace svfm::cli
