// Copyright 2026 The contseg Authors
// SPDX-License-Identifier: Apache-2.0

// Command-line entry point. Exit codes: 0 success, 1 runtime failure,
// 2 usage error, 3 configuration violation, 4 run directory locked.

#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace contseg {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitConfig = 3;
inline constexpr int kExitLocked = 4;

/// Environment variable that overrides the configured output root.
inline constexpr const char* kOutputRootEnv = "CONTSEG_OUTPUT_ROOT";

/// args excludes the program name. Failures print one JSON error record to `err`.
int cli_main(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

int cli_main(int argc, char** argv);

}  // namespace contseg
