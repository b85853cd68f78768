#include <iostream>

#include "gflow/cli.hpp"

int main(int argc, char** argv) { return gflow::cli::run({argv, argv + argc}, std::cout, std::cerr); }
