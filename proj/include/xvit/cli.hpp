#pragma once

#include <ostream>
#include <string>

#include "xvit/model.hpp"

namespace xvit {

inline constexpr const char* kVersion = "0.1.0";

// Exit codes shared by every subcommand.
inline constexpr int kExitOk = 0;
inline constexpr int kExitCheckFailed = 1;
inline constexpr int kExitUsage = 2;

// Entry point behind the `xvit` binary. Subcommands: bench, gradcheck,
// count, assoc, train-toy, eval.
int run_cli(int argc, const char* const* argv, std::ostream& out,
            std::ostream& err);

// A named config ("nano", "micro") or a path to a JSON config file.
ModelConfig resolve_config(const std::string& name_or_path);

}  // namespace xvit
