#pragma once

#include <ostream>
#include <span>
#include <string>

namespace sevdet::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

/// Runs one `sevdet` invocation (args exclude the program name). Never throws;
/// the exit code classifies the outcome.
int run(std::span<const std::string> args, std::ostream& out, std::ostream& err);

}  // namespace sevdet::cli
