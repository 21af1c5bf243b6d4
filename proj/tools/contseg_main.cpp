// Copyright 2026 The contseg Authors
// SPDX-License-Identifier: Apache-2.0

#include "contseg/cli.hpp"

int main(int argc, char** argv) { return contseg::cli_main(argc, argv); }
