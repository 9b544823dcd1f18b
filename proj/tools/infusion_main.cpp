#include "infusion/cli.hpp"

int main(int argc, char** argv) { return infusion::run_cli(argc, argv); }
