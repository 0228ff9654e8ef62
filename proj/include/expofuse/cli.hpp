#pragma once

#include <iosfwd>

namespace expofuse {

// Exit codes of the command-line tool.
enum ExitCode : int { exit_ok = 0, exit_usage = 2, exit_empty = 3, exit_incompatible = 4, exit_failure = 1 };

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

} // namespace expofuse
