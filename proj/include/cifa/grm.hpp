#pragma once

// Graded response model core.
//
// Sign convention: the boundary probability of item j is
//
//   Pr(x >= k | z) = 1 / (1 + exp(alpha_{j,k} + beta_j' z)),  k = 1..K_j-1,
//
// so probabilities DECREASE as the logit alpha + beta'z grows. A positive
// loading therefore pushes respondents with large z toward LOW categories.
// Some IFA software uses the opposite sign; flip loadings and intercepts when
// comparing against those.

#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cifa/types.hpp"

namespace cifa {

/// Which correlation angles are estimated. Angles live in the strictly lower
/// triangle of a P x P matrix; anything not listed in `free` takes its value
/// from `fixed` (pi/2 by default, which yields a zero entry in L).
struct CorrelationStructure {
  std::vector<std::pair<int, int>> free;  // (row, col), row > col
  Matrix fixed;                           // P x P, strictly-lower part used
};

/// Item/factor layout plus the linear loading constraints
/// beta_j = b_j + A_j beta', where beta' is one vector of Q free loadings
/// shared by all items (so tie groups may span items).
struct ModelSpec {
  std::vector<int> categories;     // K_j >= 2
  int factors = 0;                 // P >= 0
  Matrix loading_offset;           // J x P; row j is b_j
  std::vector<Matrix> loading_map; // J entries of shape P x Q; A_j
  int free_loadings = 0;           // Q
  CorrelationStructure correlation;

  int items() const { return static_cast<int>(categories.size()); }
  int intercept_count() const;
  /// Start of item j's block inside ParameterSet::intercepts.
  std::vector<int> intercept_offsets() const;
  /// Throws std::invalid_argument describing the first violated invariant.
  void validate() const;
};

/// Simple-structure spec: item j loads freely on factor `factor_of_item[j]`
/// and nothing else. All correlation angles are free when `correlated`.
ModelSpec simple_structure(std::vector<int> categories,
                           const std::vector<int>& factor_of_item, int factors,
                           bool correlated = true);

/// Independence model with P = 0.
ModelSpec zero_factor_spec(std::vector<int> categories);

/// Per-entry loading pattern used by the compact spec grammar.
struct LoadingEntry {
  enum class Kind { fixed, free, tied };
  Kind kind = Kind::fixed;
  double value = 0.0;  // fixed value
  std::string group;   // tie-group label
};

/// Compiles a J x P pattern into (b_j, A_j). Each `free` entry gets its own
/// column of A; each distinct tie label gets one shared column.
ModelSpec compile_loading_pattern(
    std::vector<int> categories, int factors,
    const std::vector<std::vector<LoadingEntry>>& pattern,
    CorrelationStructure correlation);

/// Free parameters, all unconstrained.
///
/// intercepts: per item (a_{j,1}, d_{j,2}, ..., d_{j,K-1}) concatenated, with
///   alpha_{j,1} = a_{j,1} and alpha_{j,k} = alpha_{j,k-1} + softplus(d_{j,k}).
/// loadings: the Q free loadings beta'.
/// angles: the free correlation angles, ordered as spec.correlation.free.
struct ParameterSet {
  Vector intercepts;
  Vector loadings;
  Vector angles;
};

/// Materialized parameters of a single item.
struct Item {
  Vector intercepts;  // alpha_j, strictly increasing, length K_j - 1
  Vector loadings;    // beta_j, length P
};

struct CorrelationAngles {
  Matrix theta;  // P x P, strictly lower triangle holds the angles
};

struct CorrelationFactor {
  Matrix lower;  // L, lower triangular with unit-norm rows
  Matrix sigma;  // L L'
};

/// Everything needed to evaluate or sample the GRM.
struct Model {
  std::vector<Vector> intercepts;  // alpha_j per item
  Matrix loadings;                 // J x P, row j is beta_j
  CorrelationFactor correlation;

  int items() const { return static_cast<int>(intercepts.size()); }
  int factors() const { return static_cast<int>(loadings.cols()); }
  Item item(int j) const { return {intercepts[j], loadings.row(j).transpose()}; }
};

Model materialize(const ModelSpec& spec, const ParameterSet& params);

// -- item response functions ------------------------------------------------

/// (K+1)-vector of Pr(x >= k), k = 0..K.
Vector boundary_probs(const Item& item, const Vector& z);

/// K-vector of Pr(x = k).
Vector category_probs(const Item& item, const Vector& z);

/// log Pr(x = category | logit offset eta) for one item, computed without
/// forming the probability difference. `d_lower`/`d_upper` receive the
/// derivative w.r.t. alpha_{x} and alpha_{x+1} (boundaries below and above
/// the category; zero when that boundary does not exist). The derivative
/// w.r.t. eta is their sum.
double log_category_prob(std::span<const double> alpha, int category,
                         double eta, double& d_lower, double& d_upper);

/// sum_j log Pr(x_j | z). Throws std::out_of_range for invalid codes.
double log_cond_likelihood(const Model& model, std::span<const int> x,
                           const Vector& z);

struct LikelihoodGradient {
  std::vector<Vector> intercepts;  // d / d alpha_j
  Matrix loadings;                 // d / d beta_j, J x P
  Vector z;

  explicit LikelihoodGradient(const Model& model);
};

/// Same value as above; adds the gradient into `grad`.
double log_cond_likelihood(const Model& model, std::span<const int> x,
                           const Vector& z, LikelihoodGradient& grad);

// -- intercept reparameterization ---------------------------------------------

double softplus(double x);
double sigmoid(double x);
/// Inverse of softplus for x > 0.
double softplus_inverse(double x);

Vector intercepts_from_raw(std::span<const double> raw);
/// Inverse map; throws std::invalid_argument unless strictly increasing.
Vector raw_from_intercepts(const Vector& alpha);
/// Pulls d/d alpha back to d/d raw.
Vector raw_intercept_gradient(std::span<const double> raw,
                              const Vector& d_alpha);

// -- loading constraints ------------------------------------------------------

/// beta_j = b_j + A_j beta'.
Vector apply_constraints(const ModelSpec& spec, int item,
                         const Vector& free_loadings);
/// All items at once; J x P.
Matrix apply_constraints(const ModelSpec& spec, const Vector& free_loadings);
/// d/d beta' = sum_j A_j' d/d beta_j.
Vector constraint_gradient(const ModelSpec& spec, const Matrix& d_loadings);
/// Least-squares beta' reproducing `loadings`; throws std::invalid_argument
/// when the loadings violate the constraint pattern.
Vector free_loadings_from(const ModelSpec& spec, const Matrix& loadings);

// -- hyperspherical correlation ----------------------------------------------

/// cos(theta), exact zero at theta == pi/2.
double cos_angle(double theta);

/// Validates every strictly-lower angle lies in (0, pi].
CorrelationFactor build_correlation(const CorrelationAngles& angles);
/// No domain check; any real angles give a valid factor.
Matrix cholesky_from_angles(const Matrix& theta);
/// Pulls d/dL (lower triangle) back to d/d theta (strictly lower triangle).
Matrix angle_gradient(const Matrix& theta, const Matrix& d_lower);
/// Inverse map for L with unit-norm rows and nonnegative diagonal.
Matrix angles_from_cholesky(const Matrix& lower);
/// Angles representing a correlation matrix (Cholesky, then inverse map).
CorrelationAngles angles_from_correlation(const Matrix& sigma);

/// Full angle matrix from the free vector and the spec's fixed values.
Matrix assemble_angles(const ModelSpec& spec, const Vector& free_angles);
/// Equivalent angles in (0, pi] producing the same Sigma. Returns `free`
/// unchanged if a fixed angle would have to move.
Vector canonical_free_angles(const ModelSpec& spec, const Vector& free_angles);

// -- sampling ---------------------------------------------------------------

/// z ~ N(0, Sigma) using the model's Cholesky factor, then x | z.
ResponseMatrix sample_responses(const Model& model, int n, std::uint64_t seed);
/// Same, with Sigma supplied explicitly (only PSD is required).
ResponseMatrix sample_responses(const std::vector<Item>& items,
                                const Matrix& sigma, int n,
                                std::uint64_t seed);

/// Observed category proportions per item (the P = 0 MLE).
std::vector<Vector> zero_factor_mle(const ResponseMatrix& data,
                                    const std::vector<int>& categories);

/// Independent multinomial columns with the given proportions.
ResponseMatrix sample_baseline(const std::vector<Vector>& proportions, int n,
                               std::uint64_t seed);

/// Throws std::out_of_range naming the first bad cell.
void validate_responses(const ResponseMatrix& data,
                        const std::vector<int>& categories);

}  // namespace cifa
