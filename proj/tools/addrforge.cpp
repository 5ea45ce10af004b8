#include <iostream>

#include "addrforge/cli.hpp"

int main(int argc, char** argv) { return addrforge::cli::run(argc, argv, std::cout, std::cerr); }
