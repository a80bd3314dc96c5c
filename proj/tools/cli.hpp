#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace ace::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitError = 1;  // validation, I/O, or a failed verification
inline constexpr int kExitUsage = 2;

// args excludes the program name. Verification reports go to `out`, every
// diagnostic to `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace ace::cli
