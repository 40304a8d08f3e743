#include "timerag/cli.hpp"

int main(int argc, char** argv) { return timerag::cli::run(argc, argv); }
