#include "costdet/cli.hpp"

#include <iostream>

int main(int argc, char** argv)
{
    return costdet::cli::run(argc, argv, std::cout, std::cerr);
}
