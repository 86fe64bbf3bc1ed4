#include "shrinkalloc/cli.hpp"

int main(int argc, char** argv) { return shrinkalloc::cli::run_cli(argc, argv); }
