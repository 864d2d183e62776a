#pragma once

#include <string>
#include <vector>

namespace docklab {

// Entry point behind the docklab binary. args excludes the program name.
// Exit codes: 0 success, 2 config/usage error, 3 data/format error,
// 4 numeric failure.
int run_command(const std::vector<std::string>& args);

}  // namespace docklab
