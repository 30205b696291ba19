#include <iostream>
#include <string>
#include <vector>

#include "attentropy/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv, argv + argc);
  return attentropy::cli::run(args, std::cout, std::cerr);
}
