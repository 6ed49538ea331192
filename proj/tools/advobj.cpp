#include <iostream>

#include "advobj/cli.hpp"

int main(int argc, char** argv) {
  return advobj::run_cli(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}
