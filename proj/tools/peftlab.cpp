// SPDX-License-Identifier: Apache-2.0
#include "peft/cli.hpp"

int main(int argc, char** argv) { return peft::run_cli(argc, argv); }
