#pragma once

#include <ostream>

namespace msdet {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 1;
inline constexpr int kExitRuntime = 2;

/// Entry point of the command-line tool. Subcommands: gen-data, analyze,
/// sweep, compare-splits, train, detect, eval, compress, plot.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

} // namespace msdet
