#include <iostream>

#include "spat/cli.hpp"

int main(int argc, char** argv) { return spat::cli::run(argc, argv, std::cout, std::cerr); }
