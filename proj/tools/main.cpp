#include <iostream>

#include "msdet/cli.hpp"

int main(int argc, char** argv)
{
    return msdet::run_cli(argc, argv, std::cout, std::cerr);
}
