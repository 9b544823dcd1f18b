#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace infusion {

// Exit codes: 0 success, 1 usage/contract/config error, 2 numeric or integrity failure.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run_cli(int argc, char** argv);

}  // namespace infusion
