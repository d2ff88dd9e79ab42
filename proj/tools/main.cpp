#include "cli.hpp"

int main(int argc, char** argv) { return adavit::cli::run(argc, argv); }
