#include "coved/cli.hpp"

int main(int argc, char** argv) { return coved::run_cli(argc, argv); }
