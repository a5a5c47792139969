#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace limcast::cli {

enum ExitCode : int { ok = 0, failure = 1, config_error = 2, data_error = 3, numerical_error = 4 };

/// Parses `args` (without the program name) and runs one subcommand.
/// Library errors are mapped to exit codes and reported on `err`.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace limcast::cli
