#include "mtaf/cli.hpp"

int main(int argc, char** argv) { return mtaf::cli::run(argc, argv); }
