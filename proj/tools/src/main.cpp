#include "cli.hpp"

#include "limcast/runtime.hpp"

#include <iostream>

int main(int argc, char** argv) {
  limcast::configure_allocator();
  return limcast::cli::run_cli(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}
