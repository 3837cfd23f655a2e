#include "fuseseg/commands.hpp"

int main(int argc, char** argv) { return fuseseg::cli_main(argc, argv); }
