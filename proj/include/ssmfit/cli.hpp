#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace ssmfit {

/// Command-line entry point: `run`, `fit`, `simulate` and `gradcheck`.
/// Returns 0 on success, 1 on solver failure and 2 on usage errors (unknown
/// flags, missing files, invalid configs).
int cli_main(int argc, char** argv);

/// Same, with explicit arguments (without the program name) and streams.
int cli_main(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace ssmfit
