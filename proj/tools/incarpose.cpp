#include "incarpose/cli.hpp"

int main(int argc, char** argv) { return incarpose::cli::run(argc, argv); }
