#include "cktgen/cli.hpp"

int main(int argc, char** argv) { return cktgen::cli::dispatch(argc, argv); }
