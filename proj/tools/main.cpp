#include "fewner/cli.hpp"

int main(int argc, char** argv) { return fewner::cli::cli_main(argc, argv); }
