#include "cmtboost/cli.hpp"

int main(int argc, char** argv) { return cmtboost::run_cli(argc, argv); }
