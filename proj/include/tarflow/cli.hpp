#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace tarflow {

// Entry point of the `tarflow` tool. `args` excludes the program name.
// Returns the process exit code; errors are reported on `err`.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace tarflow
