#include "ctxtend/cli.hpp"

int main(int argc, char** argv) { return ctxtend::cli::dispatch(argc, argv); }
