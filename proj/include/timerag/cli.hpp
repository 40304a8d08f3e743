#pragma once

#include <iosfwd>

namespace timerag::cli {

/// Exit codes: 0 success, 1 usage error, 2 runtime error.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);
int run(int argc, const char* const* argv);

}  // namespace timerag::cli
