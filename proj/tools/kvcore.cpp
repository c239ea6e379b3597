#include "kvcore/cli.hpp"

#include <iostream>

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return kvcore::cli::run(args, std::cout, std::cerr);
}
