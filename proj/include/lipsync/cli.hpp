#pragma once

#include <iostream>
#include <string>
#include <vector>

namespace lipsync::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitRuntime = 2;

/// Runs one subcommand: datagen, train-syncnet, train, sample or eval.
/// `args` excludes the program name.
int dispatch(const std::vector<std::string>& args, std::ostream& out = std::cout,
             std::ostream& err = std::cerr);

}  // namespace lipsync::cli
