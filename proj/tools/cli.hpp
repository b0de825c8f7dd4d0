#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "cifa/io.hpp"

namespace cifa::cli {

enum ExitCode : int { ok = 0, usage = 1, numerical = 2 };

/// Runs the command line `args` (without the program name). Results go to
/// `out`, diagnostics to `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Output directory used when --out is omitted: $CIFA_OUTPUT_ROOT (default
/// "cifa-runs") joined with `command` and a UTC timestamp.
std::filesystem::path default_output_dir(const std::string& command);

// Study configuration documents; missing keys keep the built-in defaults.
FitConfig fit_config_from_json(const Json& doc, FitConfig base = {});
RecoveryConfig recovery_config_from_json(const Json& doc);
CalibrationConfig calibration_config_from_json(const Json& doc);
MisspecConfig misspec_config_from_json(const Json& doc);

}  // namespace cifa::cli
