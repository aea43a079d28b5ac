#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace hetreg::cli {

enum Exit : int
{
  ok      = 0,
  usage   = 2,
  io      = 3,
  numeric = 4,
};

/// Runs one command line; args[0] is the program name.
int run(const std::vector<std::string> &args, std::ostream &out, std::ostream &err);

} // namespace hetreg::cli
