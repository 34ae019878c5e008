#include "cli.hpp"

int main(int argc, char** argv) { return gcm::cli::run(argc, argv); }
