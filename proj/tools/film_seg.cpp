#include "filmseg/cli.hpp"

int main(int argc, char** argv) { return filmseg::cli::run(argc, argv); }
