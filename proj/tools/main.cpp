#include "protodet/cli.hpp"

int main(int argc, char** argv) { return protodet::cli::main_entry(argc, argv); }
