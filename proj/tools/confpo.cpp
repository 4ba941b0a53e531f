// SPDX-License-Identifier: Apache-2.0

#include "confpo/cli.hpp"

int main(int argc, char** argv) { return confpo::cli::run(argc, argv); }
