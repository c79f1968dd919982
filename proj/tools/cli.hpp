#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace pother::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitRuntime = 3;

/// Environment variable that re-roots relative output directories.
inline constexpr const char* kOutputRootEnv = "POTHER_OUTPUT_ROOT";

/// args excludes the program name. Returns the process exit code.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// 64-bit FNV-1a, hex encoded.
std::string fnv1a_hex(const std::string& bytes);

}  // namespace pother::cli
