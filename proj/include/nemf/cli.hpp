#pragma once

namespace nemf::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitNumerical = 3;

// Subcommands: train | infer | eval | export-field | gen-synthetic.
int run(int argc, const char* const* argv);

}  // namespace nemf::cli
