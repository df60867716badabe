#include "alst/cli.hpp"

int main(int argc, char** argv) { return alst::cli::run(argc, argv); }
