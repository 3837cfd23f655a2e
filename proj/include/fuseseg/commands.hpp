#pragma once

namespace fuseseg {

// Full command-line entry point (argument parsing, dispatch, error-to-exit
// code mapping). Exit codes: 0 success, 1 validation error, 2 runtime
// error.
int cli_main(int argc, const char* const* argv);

}  // namespace fuseseg
