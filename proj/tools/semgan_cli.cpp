#include "semgan/cli.hpp"

int main(int argc, char** argv) { return semgan::cli::run_cli(argc, argv); }
