#include <iostream>

#include "xvit/cli.hpp"

int main(int argc, char** argv) {
  return xvit::run_cli(argc, argv, std::cout, std::cerr);
}
