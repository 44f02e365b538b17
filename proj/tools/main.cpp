#include <iostream>

#include "stmoe/cli.hpp"

int main(int argc, char** argv) { return stmoe::cli::run(argc, argv, std::cout, std::cerr); }
