#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace megatron::cli {

enum ExitCode : int {
  kOk = 0,
  kInternal = 1,
  kConfig = 2,
  kMissingArtifact = 3,
  kOverwrite = 4,
};

/// Parse `args` (without the program name) and run one subcommand.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace megatron::cli
