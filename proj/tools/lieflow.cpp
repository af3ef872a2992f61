#include "lieflow/cli.hpp"

int main(int argc, char** argv) { return lieflow::run_cli(argc, argv); }
