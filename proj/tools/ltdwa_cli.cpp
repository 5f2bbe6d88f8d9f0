#include "ltdwa/cli.hpp"

int main(int argc, char** argv) { return ltdwa::cli::run_cli(argc, argv); }
