#pragma once

#include <string>
#include <vector>

namespace cmtboost {

// Exit codes: 0 ok, 2 config error, 3 data error, 4 divergence,
// 5 checkpoint incompatibility, 6 gradcheck threshold breach.
inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitData = 3;
inline constexpr int kExitDivergence = 4;
inline constexpr int kExitCheckpoint = 5;
inline constexpr int kExitGradcheck = 6;

/// Full command-line entry point (train/eval/gradcheck/inspect/synth).
/// Returns the process exit code; testable in-process.
int run_cli(const std::vector<std::string>& args);
int run_cli(int argc, const char* const* argv);

}  // namespace cmtboost
