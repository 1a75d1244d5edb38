#include "ofusion/cli.hpp"

int main(int argc, char** argv) { return ofusion::cli::run(argc, argv); }
