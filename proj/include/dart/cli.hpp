// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace dart {

inline constexpr const char* kVersion = "0.1.0";

/// Entry point of the `dart` tool. `args` excludes the program name. Returns
/// the process exit code: 0 iff the command ran and every verification it
/// performed passed.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Report text with its "wallclock" member removed, re-serialized. Two runs
/// with identical flags produce identical payloads.
std::string report_payload(const std::string& report_text);

}  // namespace dart
