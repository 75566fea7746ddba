#pragma once

#include <ostream>

namespace steerkit {

// Entry point of the steerkit command line. Returns 0 on success, 1 for usage
// or validation errors and 2 for runtime failures.
int cli_main(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace steerkit
