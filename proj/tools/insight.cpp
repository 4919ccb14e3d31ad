#include "insight/cli.hpp"

#include <iostream>

int main(int argc, char** argv) { return insight::cli::run(argc, argv, std::cout, std::cerr); }
