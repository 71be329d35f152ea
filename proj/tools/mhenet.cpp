#include "mhenet/cli.hpp"

int main(int argc, char** argv) { return mhenet::run_cli(argc, argv); }
