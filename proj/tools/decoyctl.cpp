#include "decoy/harness.hpp"

int main(int argc, char** argv) { return decoy::cli_main(argc, argv); }
