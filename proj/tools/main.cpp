#include "offlang/cli.hpp"

int main(int argc, char** argv) { return offlang::run_command(argc, argv); }
