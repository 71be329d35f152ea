#pragma once

namespace mhenet {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitFailure = 2;

/// Entry point for the `mhenet` tool: train, predict, eval and gradcheck.
int run_cli(int argc, char** argv);

}  // namespace mhenet
