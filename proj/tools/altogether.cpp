#include <iostream>

#include "altogether/cli.hpp"

int main(int argc, char** argv) { return altogether::cli::run(argc, argv, std::cout, std::cerr); }
