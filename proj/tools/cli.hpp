#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace gridcascade::cli {

inline constexpr const char* kToolVersion = "0.4.0";

// Exit codes.
inline constexpr int kCompleted = 0;
inline constexpr int kInputError = 1;
inline constexpr int kCollapsed = 10;
inline constexpr int kInfeasible = 20;

/// args excludes the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace gridcascade::cli
