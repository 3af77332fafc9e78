#include "patchzero/cli.hpp"

int main(int argc, char** argv) { return pz::run_command(argc, argv); }
