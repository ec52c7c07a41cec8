#include "insighttab/cli.hpp"

int main(int argc, char** argv) { return insighttab::cli::run(argc, argv); }
