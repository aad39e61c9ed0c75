#include "mqsel/cli.hpp"

int main(int argc, char** argv) { return mqsel::cli_main(argc, argv); }
