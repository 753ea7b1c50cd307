#include "krkc/cli.hpp"

int main(int argc, char** argv) { return krkc::run_cli(argc, argv); }
