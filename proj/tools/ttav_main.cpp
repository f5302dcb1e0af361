#include "ttav/cli.hpp"

int main(int argc, char** argv) { return ttav::cli::main(argc, argv); }
