#include <iostream>

#include "fnas/cli.hpp"

int main(int argc, char** argv) {
  return fnas::run_cli(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}
