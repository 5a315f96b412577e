#include "qsgld/cli.hpp"

int main(int argc, char** argv) { return qsgld::cli(argc, argv); }
