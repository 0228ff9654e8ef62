#include "expofuse/cli.hpp"

#include <iostream>

int main(int argc, char** argv) { return expofuse::run_cli(argc, argv, std::cout, std::cerr); }
