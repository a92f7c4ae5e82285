#include "milal/cli.hpp"

int main(int argc, char** argv) { return milal::run_cli(argc, argv); }
