#include <iostream>

#include "rsaforge/cli.hpp"

int main(int argc, char** argv) {
  return rsaforge::cli::run_cli(argc, argv, std::cout, std::cerr);
}
