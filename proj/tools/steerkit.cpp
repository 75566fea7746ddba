#include <iostream>

#include "steerkit/cli.hpp"

int main(int argc, char** argv) { return steerkit::cli_main(argc, argv, std::cout, std::cerr); }
