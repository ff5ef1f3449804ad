#include "multiaxial/cli.hpp"

int main(int argc, char** argv) { return multiaxial::cli::dispatch(argc, argv); }
