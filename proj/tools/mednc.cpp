#include "mednc/cli/commands.hpp"

int main(int argc, char** argv) { return mednc::cli::run_cli(argc, argv); }
