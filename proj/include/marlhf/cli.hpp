#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace marlhf {

// Exit codes.
inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitRuntime = 2;

// Entry point of the `marlhf` command line. `args` excludes the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

// Fixed histogram bin edges used by `export`.
std::vector<double> histogram_edges();
std::vector<std::size_t> histogram_counts(const std::vector<double>& scores);

}  // namespace marlhf
