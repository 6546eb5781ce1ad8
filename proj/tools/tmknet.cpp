#include <iostream>

#include "tmknet/cli.hpp"

int main(int argc, char** argv) { return tmknet::cli::run(argc, argv, std::cout, std::cerr); }
