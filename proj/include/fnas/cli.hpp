#pragma once

// `fnas search|derive|retrain|eval|space-size|render` entry point.

#include <ostream>
#include <string>
#include <vector>

#include "fnas/config.hpp"

namespace fnas {

/// Output root used when neither --out nor output_dir is given.
inline constexpr const char* kOutputEnv = "FNAS_OUT";

enum ExitCode : int { kExitOk = 0, kExitRuntime = 1, kExitUsage = 2 };

/// Exit code for an exception escaping a subcommand: 2 for usage, config,
/// parse, validation and missing-input errors, 1 for everything else.
int exit_code_for(const std::exception& e);

/// Runs one command line (args exclude the program name). Results go to out,
/// errors to err; never throws.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Exact space size followed by `≈<scientific>`.
std::string space_size_text(const SpaceConfig& space);

/// Genotype recomputed from the architecture banks stored in a search checkpoint.
Genotype derive_from_checkpoint(const Checkpoint& ck, const SpaceConfig& space, ActivationKind fixed_activation);

}  // namespace fnas
