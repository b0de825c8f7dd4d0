#pragma once

// Classifier two-sample tests for generative models of response patterns.
//
// Real rows are labeled 1 and synthetic rows 0. A classifier predicts the
// probability of label 1; probabilities exactly equal to 1/2 are classified
// as 0.

#include <map>
#include <memory>
#include <string>
#include <variant>
#include <vector>

#include "cifa/grm.hpp"

namespace cifa {

struct LabeledSet {
  Matrix features;              // rows are observations
  std::vector<int> labels;      // 1 real, 0 synthetic
  std::vector<int> train, test; // disjoint, together all rows
  std::vector<int> categories;  // per column; empty for real-valued features

  bool categorical() const { return !categories.empty(); }
  Eigen::Index columns() const { return features.cols(); }
};

/// Stacks N real and N synthetic rows, shuffles them and splits in half.
LabeledSet build_split(const ResponseMatrix& real, const ResponseMatrix& synthetic,
                       const std::vector<int>& categories, std::uint64_t seed);
LabeledSet build_split(const Matrix& real, const Matrix& synthetic, std::uint64_t seed);

enum class ClassifierKind { knn, neural };
std::string to_string(ClassifierKind kind);
ClassifierKind classifier_kind_from_string(const std::string& name);

/// Fitted classifier. Input rows use the same encoding as LabeledSet::features.
class Classifier {
 public:
  virtual ~Classifier() = default;
  virtual ClassifierKind kind() const = 0;
  /// Probability of label 1 for every row of `rows`.
  virtual Vector predict(const Matrix& rows) const = 0;
  /// Tuned or derived hyperparameters, for reports.
  virtual std::map<std::string, double> hyperparameters() const = 0;
};
using ClassifierHandle = std::shared_ptr<const Classifier>;

struct KnnOptions {
  int k = 0;               // 0 means floor(sqrt(N_test))
  double subsample = 1.0;  // fraction of training rows kept
  std::uint64_t seed = 0;  // used only when subsampling
};

/// Hamming distance for categorical sets, Euclidean otherwise. Ties at the
/// k-th neighbour go to the lower training-row index.
ClassifierHandle fit_knn(const LabeledSet& set, const KnnOptions& options = {});

/// Weight-decay values tried by the neural classifier.
std::vector<double> weight_decay_grid();
/// Epoch cap floor(10000 * 200 / N_test), at least 1.
int nn_epoch_cap(int n_test);

struct NeuralOptions {
  int hidden = 100;
  std::vector<double> weight_decays = weight_decay_grid();
  double validation_fraction = 0.25;
  double learning_rate = 1e-3;
  int batch_size = 200;
  double tolerance = 1e-4;   // minimum epoch loss improvement
  int patience = 10;         // epochs without improvement before stopping
  int max_epochs = 0;        // 0 means nn_epoch_cap(N_test)
  double selection_slack = 0.005;
  std::uint64_t seed = 0;
};

/// One ReLU hidden layer, logistic output, Adam. Categorical features are
/// one-hot encoded; real features are standardized with training moments.
ClassifierHandle fit_neural(const LabeledSet& set, const NeuralOptions& options = {});

/// Test-row probabilities.
Vector knn_fit_predict(const LabeledSet& set, const KnnOptions& options = {});
Vector nn_fit_predict(const LabeledSet& set, const NeuralOptions& options = {});

/// Fraction of test rows whose thresholded prediction matches the label.
double accuracy(const Vector& probabilities, const std::vector<int>& labels);

double exact_pvalue(double acc, int n_test);
/// Requires 0 < delta < 1/2.
double approx_pvalue(double acc, int n_test, double delta);
/// Approximate power of the one-sided test of acc = 1/2 + delta when the
/// true accuracy is 1/2 + delta + epsilon.
double power(double alpha, int n_test, double delta, double epsilon);

struct C2stOutcome {
  double accuracy = 0.0;
  double p_value = 0.0;
  double delta = 0.0;
  Vector probabilities;  // aligned with LabeledSet::test
  int n_test = 0;
};

/// Accuracy and p-value (exact when delta == 0).
C2stOutcome evaluate_outcome(const Vector& probabilities, const std::vector<int>& labels,
                             double delta);

/// Number of free generative parameters.
int count_parameters(const ModelSpec& spec);

struct RfiOutcome {
  double acc_prop = 0.0;
  double acc_base = 0.0;
  int m_prop = 0;
  int m_base = 0;
  double value = 0.0;
};

/// 1 - (M_prop / M_base) (acc_prop - 1/2) / (acc_base - 1/2), unclamped.
/// Throws std::domain_error when acc_base == 1/2.
double rfi(double acc_prop, double acc_base, int m_prop, int m_base);
RfiOutcome rfi_outcome(double acc_prop, double acc_base, int m_prop, int m_base);

/// acc minus the mean accuracy after shuffling each column T times.
Vector permutation_importance(const Classifier& classifier, const LabeledSet& set, int T,
                              std::uint64_t seed);

struct BaselineModel {
  std::vector<Vector> proportions;
};
using SyntheticSource = std::variant<Model, BaselineModel>;

struct C2stOptions {
  ClassifierKind classifier = ClassifierKind::neural;
  double delta = 0.0;
  KnnOptions knn;
  NeuralOptions neural;
};

struct C2stRun {
  C2stOutcome outcome;
  ClassifierHandle classifier;
  LabeledSet set;
};

/// Samples N synthetic rows from `source`, splits, fits and scores.
C2stRun run_c2st(const SyntheticSource& source, const ResponseMatrix& data,
                 const std::vector<int>& categories, const C2stOptions& options,
                 std::uint64_t seed);

/// Same procedure on an already built split.
C2stRun run_c2st(LabeledSet set, const C2stOptions& options);

}  // namespace cifa
