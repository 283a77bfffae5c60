#include <iostream>

#include "cbln/cli.hpp"

int main(int argc, char** argv) { return cbln::cli::run(argc, argv, std::cout, std::cerr); }
