#pragma once

#include <iosfwd>

namespace costdet::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitRuntime = 3;

/// Entry point for the `costdet` tool. Subcommands: generate, train,
/// evaluate, sweep, compare, experiment, oracle.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

} // namespace costdet::cli
