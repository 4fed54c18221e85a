#pragma once

namespace star {

// Subcommands: synth, train, infer, eval, check. Exit codes: 0 success,
// 2 config error, 3 synth I/O error, 4 non-finite loss, 5 checkpoint/dims
// mismatch, 6 eval schema mismatch, 7 verification failure.
// Results go to stdout, diagnostics to stderr.
int run_cli(int argc, const char* const* argv);

}  // namespace star
