#include "vila/cli.hpp"

int main(int argc, char** argv) { return vila::cli_dispatch(argc, argv); }
