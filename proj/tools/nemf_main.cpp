#include "nemf/cli.hpp"

int main(int argc, char** argv) { return nemf::cli::run(argc, argv); }
