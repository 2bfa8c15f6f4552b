#pragma once

namespace gmmjepa::cli {

/// Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
int run(int argc, char** argv);

}  // namespace gmmjepa::cli
