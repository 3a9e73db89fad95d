#include "dtm/cli.hpp"

int main(int argc, char** argv) { return dtm::run_cli(argc, argv); }
