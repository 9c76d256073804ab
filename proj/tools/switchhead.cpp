#include "switchhead/cli/app.hpp"

int main(int argc, char** argv) { return switchhead::cli::run(argc, argv); }
