#pragma once

namespace fedsim {

// Full command-line entry point (gen-data, pretrain, train, evaluate,
// report, print-config). Returns the process exit code: 0 success,
// 2 config error, 3 data error, 4 numeric/structural failure.
int run_cli(int argc, const char* const* argv);

} // namespace fedsim
