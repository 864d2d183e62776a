#include <string>
#include <vector>

#include "docklab/cli.hpp"

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return docklab::run_command(args);
}
