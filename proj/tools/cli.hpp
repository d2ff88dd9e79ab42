#pragma once

// Command-line driver. `run` never calls exit(); it returns the process status
// so tests can drive it in-process.

#include <iosfwd>
#include <string>
#include <vector>

namespace adavit::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

int run(int argc, const char* const* argv);
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Lowercase hex SHA-256 of `bytes`.
std::string sha256_hex(const std::string& bytes);

}  // namespace adavit::cli
