#include <iostream>

#include "mpn/cli.hpp"

int main(int argc, char** argv) { return mpn::run_cli(argc, argv, std::cout, std::cerr); }
