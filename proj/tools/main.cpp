#include "spurlens/cli.hpp"

int main(int argc, char** argv) { return spurlens::run_cli(argc, argv); }
