#include <iostream>

#include "seqcls/cli.hpp"

int main(int argc, char** argv) {
    return seqcls::run_cli({argv + 1, argv + argc}, std::cout, std::cerr);
}
