#include "dport/cli.hpp"

int main(int argc, char** argv) { return dport::cli::run(argc, argv); }
