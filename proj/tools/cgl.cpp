#include "cgl/harness.hpp"

int main(int argc, char** argv) { return cgl::run_cli(argc, argv); }
