// Copyright 2026 The ylab Authors
// SPDX-License-Identifier: Apache-2.0

#include <iostream>
#include <string>
#include <vector>

#include "ylab_tools/commands.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return ylab::cli::run_main(args, std::cout, std::cerr);
}
