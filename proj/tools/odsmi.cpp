#include "odsmi/cli.hpp"

int main(int argc, char** argv) { return odsmi::cli::run(argc, argv); }
