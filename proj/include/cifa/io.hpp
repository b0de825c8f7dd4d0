#pragma once

// File formats: response CSV, JSON model specs, estimates, run manifests and
// study reports. Every file is written atomically (temp file, then rename).

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "cifa/grm.hpp"
#include "cifa/iwave.hpp"
#include "cifa/sim.hpp"

namespace cifa {

using Json = nlohmann::json;

/// Library version recorded in manifests.
const char* version();

/// Raised for malformed input files; the message names the location.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// -- responses --------------------------------------------------------------------

struct ResponseLoadOptions {
  bool one_based = false;               // codes 1..K in the file
  std::optional<std::vector<int>> categories;  // validate codes when given
};

/// Comma-separated integers, one respondent per line. A first line with any
/// non-numeric cell is treated as a header.
ResponseMatrix parse_responses(std::istream& in, const ResponseLoadOptions& options = {},
                               const std::string& source = "<input>");
ResponseMatrix load_responses(const std::filesystem::path& path,
                              const ResponseLoadOptions& options = {});
std::string format_responses(const ResponseMatrix& data, bool header = true);

// -- model specs ------------------------------------------------------------------

/// Compiles a JSON spec document. Semantic errors are reported with the
/// JSON pointer of the offending value; `warnings` collects identification
/// concerns such as a factor without free loadings.
ModelSpec parse_spec(const Json& doc, std::vector<std::string>* warnings = nullptr);
ModelSpec load_spec(const std::filesystem::path& path,
                    std::vector<std::string>* warnings = nullptr);
/// Explicit (b_j, A_j) form accepted back by parse_spec.
Json spec_to_json(const ModelSpec& spec);

// -- parameters and estimates --------------------------------------------------------

Json params_to_json(const ParameterSet& params);
ParameterSet params_from_json(const ModelSpec& spec, const Json& doc);
Json model_to_json(const Model& model);
/// Inverse of model_to_json for a given spec: natural intercepts, loadings
/// and correlation matrix mapped to the spec's free parameters. Fails when
/// the values violate the spec's constraints.
ParameterSet params_from_model_json(const ModelSpec& spec, const Json& doc);
Json net_to_json(const InferenceNet& net);
InferenceNet net_from_json(const Json& doc);

/// Everything needed to reuse a fitted model.
struct Estimates {
  ModelSpec spec;
  ParameterSet params;
  std::optional<InferenceNet> net;
  Json fit;  // step count, convergence, timing

  Model model() const { return materialize(spec, params); }
};

Json estimates_to_json(const Estimates& est);
Estimates estimates_from_json(const Json& doc);
Estimates load_estimates(const std::filesystem::path& path);
Estimates estimates_from_fit(const ModelSpec& spec, const FitResult& result);

std::string format_trace(const std::vector<double>& trace);

// -- persistence ------------------------------------------------------------------------

/// Creates parent directories, writes to a temporary sibling and renames.
void write_atomic(const std::filesystem::path& path, const std::string& content);
std::string dump_json(const Json& doc);
Json read_json(const std::filesystem::path& path);

struct Manifest {
  std::string command;
  std::vector<std::string> argv;
  Json config;
  Json seeds;
  std::string started;
  std::string finished;
  std::vector<std::string> outputs;
};

Json manifest_to_json(const Manifest& m);
Manifest manifest_from_json(const Json& doc);
std::string utc_timestamp();

/// Writes estimates.json and trace.csv into `dir`; returns their paths.
std::vector<std::filesystem::path> save_results(const std::filesystem::path& dir,
                                                const ModelSpec& spec, const FitResult& result);

// -- study reports ------------------------------------------------------------------

Json report_to_json(const RecoveryReport& report);
Json report_to_json(const CalibrationReport& report);
Json report_to_json(const MisspecReport& report, const MisspecConfig& config);
/// Long format: one row per (cell, quantity).
std::string report_to_csv(const RecoveryReport& report);
std::string report_to_csv(const CalibrationReport& report);
std::string report_to_csv(const MisspecReport& report, const MisspecConfig& config);

}  // namespace cifa
