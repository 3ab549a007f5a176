#pragma once

#include <string>
#include <vector>

namespace psc {

/// Runs one CLI invocation (args exclude the program name). Returns the
/// process exit code: 0 on success, nonzero with a structured error on
/// stderr otherwise. The PSC_OUT_DIR environment variable, when set,
/// redirects relative output paths into that directory.
int cli_dispatch(const std::vector<std::string>& args);

}  // namespace psc
