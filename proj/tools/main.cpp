#include "gmmjepa/cli.hpp"

int main(int argc, char** argv) { return gmmjepa::cli::run(argc, argv); }
