#include "ssmfit/cli.hpp"

int main(int argc, char** argv) { return ssmfit::cli_main(argc, argv); }
