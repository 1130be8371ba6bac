#pragma once

#include <iosfwd>

namespace spat::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitNumeric = 3;

// Entry point of the `spat` executable. Subcommands: run, pretrain, score,
// prune, finetune, eval, zeroshot, sweep, synth-data. Relative run
// directories are resolved against $SPAT_RUN_ROOT when it is set.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace spat::cli
