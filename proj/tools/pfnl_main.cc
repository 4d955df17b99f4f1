#include <iostream>
#include <string>
#include <vector>

#include "pfnl/cli.h"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return pfnl::run_cli(args, std::cout, std::cerr);
}
