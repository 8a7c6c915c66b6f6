#include "gapfill/pipeline.hpp"

int main(int argc, char** argv) { return gapfill::cli_main(argc, argv); }
