#include <iostream>
#include <string>
#include <vector>

#include "guide/cli.hpp"
#include "guide/core.hpp"

int main(int argc, char** argv) {
  guide::tune_allocator();
  std::vector<std::string> args(argv, argv + argc);
  return guide::cli::run(args, std::cout, std::cerr);
}
