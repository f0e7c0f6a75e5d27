#include "flowalign/cli.hpp"

int main(int argc, char** argv) { return flowalign::cli::dispatch(argc, argv); }
