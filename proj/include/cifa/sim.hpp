#pragma once

// Replicated simulation studies: parameter recovery, calibration of the
// approximate C2ST on real-valued data, and misspecification detection.

#include <functional>
#include <string>
#include <vector>

#include "cifa/c2st.hpp"
#include "cifa/grm.hpp"
#include "cifa/iwave.hpp"

namespace cifa {

/// A data-generating GRM together with the spec it was written against.
struct Generator {
  ModelSpec spec;
  ParameterSet params;

  Model model() const { return materialize(spec, params); }
};

/// Replication seed: a hash of (base, cell, replication).
std::uint64_t replication_seed(std::uint64_t base, std::uint64_t cell, std::uint64_t rep);

/// Runs fn(0..count-1) on `jobs` worker threads (jobs <= 1 runs inline).
void parallel_for(int count, int jobs, const std::function<void(int)>& fn);

/// Flips factor columns of a fitted model so each factor's loadings agree in
/// sign with `reference`; Sigma becomes D Sigma D.
Model align_signs(const Model& fitted, const Matrix& reference_loadings);

// -- recovery ---------------------------------------------------------------------

struct RecoveryCell {
  int n = 1000;
  int iw_samples = 5;
};

struct RecoveryConfig {
  Generator generator;  // the fitted spec equals the generating spec
  std::vector<RecoveryCell> cells;
  int replications = 50;
  std::uint64_t seed = 1;
  FitConfig fit;  // iw_samples and seed are set per replication
  int jobs = 1;
  bool refit_poor_maxima = true;
  double flag_threshold = 5.0;  // MC standard errors below the cell median

  void validate() const;
};

/// Tracked quantities: every intercept, every free loading and the free
/// correlations, in that order.
struct TrackedParameter {
  std::string name;
  double truth = 0.0;
};
std::vector<TrackedParameter> tracked_parameters(const Generator& generator);
Vector tracked_values(const ModelSpec& spec, const Model& model);

struct FitRecord {
  int cell = 0;
  int replication = 0;
  std::uint64_t seed = 0;
  Vector estimate;  // tracked_values, sign-aligned
  double final_elbo = 0.0;
  double elbo_se = 0.0;
  int steps = 0;
  bool converged = false;
  bool flagged = false;
  bool refitted = false;
  double seconds = 0.0;
  std::string error;  // nonempty if the fit failed

  bool ok() const { return error.empty(); }
};

struct ParameterSummary {
  std::string name;
  double truth = 0.0;
  double bias = 0.0;
  double mse = 0.0;
};

struct RecoveryCellReport {
  RecoveryCell cell;
  std::vector<ParameterSummary> parameters;
  int completed = 0;
  int failures = 0;
  int flagged = 0;
  double mean_seconds = 0.0;
};

struct RecoveryReport {
  std::vector<RecoveryCellReport> cells;
  std::vector<FitRecord> records;
  std::vector<TrackedParameter> parameters;
};

RecoveryReport run_recovery(const RecoveryConfig& config);
/// Recomputes the per-cell aggregates from raw records.
std::vector<RecoveryCellReport> aggregate_recovery(const std::vector<RecoveryCell>& cells,
                                                   const std::vector<TrackedParameter>& params,
                                                   const std::vector<FitRecord>& records);

// -- uniform calibration ------------------------------------------------------------

struct CalibrationArm {
  double shift = 0.05;    // synthetic ~ U(shift, 1 + shift), real ~ U(0, 1)
  double epsilon = 0.0;   // nominal effect size for the power prediction
};

struct CalibrationConfig {
  std::vector<CalibrationArm> arms{{0.05, 0.0}, {0.10, 0.025}};
  std::vector<int> sizes{250, 1000, 2500};
  std::vector<ClassifierKind> classifiers{ClassifierKind::knn, ClassifierKind::neural};
  double delta = 0.025;
  double alpha = 0.05;
  int replications = 100;
  std::uint64_t seed = 1;
  int jobs = 1;
  NeuralOptions neural;

  void validate() const;
};

struct CalibrationRecord {
  int arm = 0;
  int n = 0;
  ClassifierKind classifier = ClassifierKind::knn;
  int replication = 0;
  double accuracy = 0.0;
  double p_value = 0.0;
  bool reject = false;
  double seconds = 0.0;
};

struct CalibrationCellReport {
  CalibrationArm arm;
  int n = 0;
  ClassifierKind classifier = ClassifierKind::knn;
  double rejection_rate = 0.0;
  double mean_accuracy = 0.0;
  double predicted_power = 0.0;
  int replications = 0;
};

struct CalibrationReport {
  std::vector<CalibrationCellReport> cells;
  std::vector<CalibrationRecord> records;
};

CalibrationReport run_uniform_calibration(const CalibrationConfig& config);
std::vector<CalibrationCellReport> aggregate_calibration(
    const CalibrationConfig& config, const std::vector<CalibrationRecord>& records);

// -- misspecification -----------------------------------------------------------------

struct FittedVariant {
  std::string name;
  ModelSpec spec;
};

struct MisspecConfig {
  Generator generator;
  std::vector<FittedVariant> variants;
  std::vector<int> sizes{5000};
  std::vector<ClassifierKind> classifiers{ClassifierKind::neural};
  std::vector<double> deltas{0.0, 0.025};
  double alpha = 0.05;
  int replications = 50;
  int pi_repetitions = 5;
  std::vector<int> flagged_items;  // items expected to carry the misfit
  std::uint64_t seed = 1;
  FitConfig fit;
  int jobs = 1;
  bool refit_poor_maxima = true;
  double flag_threshold = 5.0;
  NeuralOptions neural;
  KnnOptions knn;

  void validate() const;
};

struct MisspecRecord {
  int variant = 0;
  int n = 0;
  ClassifierKind classifier = ClassifierKind::neural;
  int replication = 0;
  double accuracy = 0.0;
  std::vector<double> p_values;  // aligned with config.deltas
  double baseline_accuracy = 0.0;
  double rfi = 0.0;
  bool rfi_defined = true;
  Vector importance;  // per item
  bool top_hit = false;  // flagged items occupy the top ranks
  bool flagged_fit = false;
  std::string error;

  bool ok() const { return error.empty(); }
};

struct MisspecCellReport {
  std::string variant;
  int n = 0;
  ClassifierKind classifier = ClassifierKind::neural;
  std::vector<double> rejection_rates;  // aligned with config.deltas
  double mean_accuracy = 0.0;
  double median_rfi = 0.0;
  double top_hit_rate = 0.0;
  Vector mean_importance;
  int completed = 0;
  int failures = 0;
};

struct MisspecReport {
  std::vector<MisspecCellReport> cells;
  std::vector<MisspecRecord> records;
};

MisspecReport run_misspecification(const MisspecConfig& config);
std::vector<MisspecCellReport> aggregate_misspecification(
    const MisspecConfig& config, const std::vector<MisspecRecord>& records);

/// True when the `items` occupy the top |items| entries of `importance`.
bool flags_top_items(const Vector& importance, const std::vector<int>& items);

// -- desk-scale defaults --------------------------------------------------------------

/// P = 2, J = 10, K = 3 simple structure with correlation 0.3.
Generator default_recovery_generator();
RecoveryConfig default_recovery_config();
CalibrationConfig default_calibration_config();
/// Two correlated factors on J = 10 items plus an orthogonal doublet factor on
/// two items of the first factor with a tied loading. Variants: "under" (no
/// doublet) and "correct".
MisspecConfig default_misspecification_config();

double median(std::vector<double> values);

}  // namespace cifa
