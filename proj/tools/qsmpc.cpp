#include "cli.hpp"

int main(int argc, char** argv) { return qsmpc::cli::cli_main(argc, argv); }
