#include "cifa/grm.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <set>
#include <sstream>

namespace cifa {

namespace {

constexpr double kHalfPi = std::numbers::pi / 2.0;

Matrix default_fixed_angles(int factors) {
  return Matrix::Constant(factors, factors, kHalfPi);
}

std::string item_label(int j) { return "item " + std::to_string(j); }

}  // namespace

// -- spec -------------------------------------------------------------------

int ModelSpec::intercept_count() const {
  int total = 0;
  for (int k : categories) total += k - 1;
  return total;
}

std::vector<int> ModelSpec::intercept_offsets() const {
  std::vector<int> offsets(categories.size());
  int at = 0;
  for (std::size_t j = 0; j < categories.size(); ++j) {
    offsets[j] = at;
    at += categories[j] - 1;
  }
  return offsets;
}

void ModelSpec::validate() const {
  const int J = items();
  if (J == 0) throw std::invalid_argument("model spec has no items");
  if (factors < 0) throw std::invalid_argument("factor count must be >= 0");
  for (int j = 0; j < J; ++j) {
    if (categories[j] < 2) {
      throw std::invalid_argument(item_label(j) + ": needs at least 2 categories");
    }
  }
  if (free_loadings < 0) throw std::invalid_argument("negative free loading count");
  if (loading_offset.rows() != J || loading_offset.cols() != factors) {
    throw std::invalid_argument("loading offsets must be J x P");
  }
  if (static_cast<int>(loading_map.size()) != J) {
    throw std::invalid_argument("need one constraint matrix per item");
  }
  for (int j = 0; j < J; ++j) {
    if (loading_map[j].rows() != factors || loading_map[j].cols() != free_loadings) {
      std::ostringstream msg;
      msg << item_label(j) << ": constraint matrix is " << loading_map[j].rows()
          << " x " << loading_map[j].cols() << ", expected " << factors << " x "
          << free_loadings;
      throw std::invalid_argument(msg.str());
    }
  }
  if (correlation.fixed.rows() != factors || correlation.fixed.cols() != factors) {
    throw std::invalid_argument("fixed angle matrix must be P x P");
  }
  std::set<std::pair<int, int>> seen;
  for (auto [r, c] : correlation.free) {
    if (r <= c || c < 0 || r >= factors) {
      throw std::invalid_argument("free angle (" + std::to_string(r) + ", " +
                                  std::to_string(c) +
                                  ") is not in the strict lower triangle");
    }
    if (!seen.insert({r, c}).second) {
      throw std::invalid_argument("free angle listed twice");
    }
  }
  for (int r = 0; r < factors; ++r) {
    for (int c = 0; c < r; ++c) {
      if (seen.count({r, c})) continue;
      double a = correlation.fixed(r, c);
      if (!(a > 0.0 && a <= std::numbers::pi)) {
        throw std::invalid_argument("fixed angle outside (0, pi]");
      }
    }
  }
}

ModelSpec simple_structure(std::vector<int> categories,
                           const std::vector<int>& factor_of_item, int factors,
                           bool correlated) {
  const int J = static_cast<int>(categories.size());
  if (static_cast<int>(factor_of_item.size()) != J) {
    throw std::invalid_argument("factor assignment length differs from item count");
  }
  ModelSpec spec;
  spec.categories = std::move(categories);
  spec.factors = factors;
  spec.loading_offset = Matrix::Zero(J, factors);
  spec.free_loadings = J;
  spec.loading_map.assign(J, Matrix::Zero(factors, J));
  for (int j = 0; j < J; ++j) {
    int p = factor_of_item[j];
    if (p < 0 || p >= factors) {
      throw std::invalid_argument(item_label(j) + ": factor index out of range");
    }
    spec.loading_map[j](p, j) = 1.0;
  }
  spec.correlation.fixed = default_fixed_angles(factors);
  if (correlated) {
    for (int r = 1; r < factors; ++r)
      for (int c = 0; c < r; ++c) spec.correlation.free.emplace_back(r, c);
  }
  spec.validate();
  return spec;
}

ModelSpec zero_factor_spec(std::vector<int> categories) {
  ModelSpec spec;
  const int J = static_cast<int>(categories.size());
  spec.categories = std::move(categories);
  spec.factors = 0;
  spec.loading_offset = Matrix::Zero(J, 0);
  spec.loading_map.assign(J, Matrix::Zero(0, 0));
  spec.correlation.fixed = Matrix::Zero(0, 0);
  spec.validate();
  return spec;
}

ModelSpec compile_loading_pattern(
    std::vector<int> categories, int factors,
    const std::vector<std::vector<LoadingEntry>>& pattern,
    CorrelationStructure correlation) {
  const int J = static_cast<int>(categories.size());
  if (static_cast<int>(pattern.size()) != J) {
    throw std::invalid_argument("loading pattern needs one row per item");
  }
  // First pass assigns a column to every free entry and tie label, in
  // row-major order of first appearance.
  std::map<std::string, int> tie_column;
  std::vector<std::vector<int>> column(J, std::vector<int>(factors, -1));
  int q = 0;
  for (int j = 0; j < J; ++j) {
    if (static_cast<int>(pattern[j].size()) != factors) {
      throw std::invalid_argument(item_label(j) + ": pattern row has " +
                                  std::to_string(pattern[j].size()) +
                                  " entries, expected " + std::to_string(factors));
    }
    for (int p = 0; p < factors; ++p) {
      const auto& e = pattern[j][p];
      if (e.kind == LoadingEntry::Kind::free) {
        column[j][p] = q++;
      } else if (e.kind == LoadingEntry::Kind::tied) {
        if (e.group.empty()) throw std::invalid_argument("empty tie-group label");
        auto [it, inserted] = tie_column.emplace(e.group, q);
        if (inserted) ++q;
        column[j][p] = it->second;
      }
    }
  }
  ModelSpec spec;
  spec.categories = std::move(categories);
  spec.factors = factors;
  spec.free_loadings = q;
  spec.loading_offset = Matrix::Zero(J, factors);
  spec.loading_map.assign(J, Matrix::Zero(factors, q));
  for (int j = 0; j < J; ++j) {
    for (int p = 0; p < factors; ++p) {
      if (column[j][p] >= 0) {
        spec.loading_map[j](p, column[j][p]) = 1.0;
      } else {
        spec.loading_offset(j, p) = pattern[j][p].value;
      }
    }
  }
  if (correlation.fixed.size() == 0) correlation.fixed = default_fixed_angles(factors);
  spec.correlation = std::move(correlation);
  spec.validate();
  return spec;
}

Model materialize(const ModelSpec& spec, const ParameterSet& params) {
  const int J = spec.items();
  if (params.intercepts.size() != spec.intercept_count() ||
      params.loadings.size() != spec.free_loadings ||
      params.angles.size() != static_cast<Eigen::Index>(spec.correlation.free.size())) {
    throw std::invalid_argument("parameter set does not conform to the model spec");
  }
  Model model;
  model.intercepts.reserve(J);
  auto offsets = spec.intercept_offsets();
  for (int j = 0; j < J; ++j) {
    model.intercepts.push_back(intercepts_from_raw(
        {params.intercepts.data() + offsets[j],
         static_cast<std::size_t>(spec.categories[j] - 1)}));
  }
  model.loadings = apply_constraints(spec, params.loadings);
  Matrix theta = assemble_angles(spec, params.angles);
  model.correlation.lower = cholesky_from_angles(theta);
  model.correlation.sigma =
      model.correlation.lower * model.correlation.lower.transpose();
  return model;
}

// -- response functions ---------------------------------------------------------

double softplus(double x) {
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

double softplus_inverse(double x) {
  if (!(x > 0.0)) throw std::invalid_argument("softplus inverse needs x > 0");
  return x > 20.0 ? x + std::log(-std::expm1(-x)) : std::log(std::expm1(x));
}

Vector boundary_probs(const Item& item, const Vector& z) {
  if (z.size() != item.loadings.size()) {
    throw std::invalid_argument("latent vector length differs from factor count");
  }
  const Eigen::Index K = item.intercepts.size() + 1;
  const double eta = item.loadings.dot(z);
  Vector b(K + 1);
  b(0) = 1.0;
  for (Eigen::Index k = 1; k < K; ++k) b(k) = sigmoid(-(item.intercepts(k - 1) + eta));
  b(K) = 0.0;
  return b;
}

Vector category_probs(const Item& item, const Vector& z) {
  Vector b = boundary_probs(item, z);
  const Eigen::Index K = b.size() - 1;
  Vector pi(K);
  for (Eigen::Index k = 0; k < K; ++k) pi(k) = b(k) - b(k + 1);
  return pi;
}

double log_category_prob(std::span<const double> alpha, int category, double eta,
                         double& d_lower, double& d_upper) {
  const int last = static_cast<int>(alpha.size());  // K - 1
  d_lower = 0.0;
  d_upper = 0.0;
  if (category == 0) {
    // Pr(x = 0) = sigmoid(s_1)
    const double s = alpha[0] + eta;
    d_upper = sigmoid(-s);
    return -softplus(-s);
  }
  if (category == last) {
    // Pr(x = K-1) = sigmoid(-s_{K-1})
    const double s = alpha[last - 1] + eta;
    d_lower = -sigmoid(s);
    return -softplus(s);
  }
  // sigmoid(-a) - sigmoid(-b) = sigmoid(-a) sigmoid(b) (1 - exp(a - b)), a < b
  const double a = alpha[category - 1] + eta;
  const double b = alpha[category] + eta;
  const double gap = std::expm1(b - a);
  d_lower = -sigmoid(a) - 1.0 / gap;
  d_upper = sigmoid(-b) + 1.0 / gap;
  return -softplus(a) - softplus(-b) + std::log(-std::expm1(a - b));
}

namespace {

void check_code(const Model& model, int j, int x) {
  const int K = static_cast<int>(model.intercepts[j].size()) + 1;
  if (x < 0 || x >= K) {
    throw std::out_of_range(item_label(j) + ": category code " + std::to_string(x) +
                            " outside 0.." + std::to_string(K - 1));
  }
}

}  // namespace

double log_cond_likelihood(const Model& model, std::span<const int> x,
                           const Vector& z) {
  const int J = model.items();
  if (static_cast<int>(x.size()) != J) {
    throw std::invalid_argument("response pattern length differs from item count");
  }
  if (z.size() != model.factors()) {
    throw std::invalid_argument("latent vector length differs from factor count");
  }
  const Vector eta = model.loadings * z;
  double total = 0.0, dl = 0.0, du = 0.0;
  for (int j = 0; j < J; ++j) {
    check_code(model, j, x[j]);
    const Vector& a = model.intercepts[j];
    total += log_category_prob({a.data(), static_cast<std::size_t>(a.size())}, x[j],
                               eta(j), dl, du);
  }
  return total;
}

LikelihoodGradient::LikelihoodGradient(const Model& model)
    : loadings(Matrix::Zero(model.items(), model.factors())),
      z(Vector::Zero(model.factors())) {
  intercepts.reserve(model.items());
  for (const auto& a : model.intercepts) intercepts.push_back(Vector::Zero(a.size()));
}

double log_cond_likelihood(const Model& model, std::span<const int> x,
                           const Vector& z, LikelihoodGradient& grad) {
  const int J = model.items();
  if (static_cast<int>(x.size()) != J) {
    throw std::invalid_argument("response pattern length differs from item count");
  }
  if (z.size() != model.factors()) {
    throw std::invalid_argument("latent vector length differs from factor count");
  }
  const Vector eta = model.loadings * z;
  Vector d_eta(J);
  double total = 0.0;
  for (int j = 0; j < J; ++j) {
    check_code(model, j, x[j]);
    const Vector& a = model.intercepts[j];
    double dl = 0.0, du = 0.0;
    total += log_category_prob({a.data(), static_cast<std::size_t>(a.size())}, x[j],
                               eta(j), dl, du);
    if (x[j] > 0) grad.intercepts[j](x[j] - 1) += dl;
    if (x[j] < a.size()) grad.intercepts[j](x[j]) += du;
    d_eta(j) = dl + du;
  }
  grad.loadings.noalias() += d_eta * z.transpose();
  grad.z.noalias() += model.loadings.transpose() * d_eta;
  return total;
}

// -- intercepts -----------------------------------------------------------------

Vector intercepts_from_raw(std::span<const double> raw) {
  Vector alpha(static_cast<Eigen::Index>(raw.size()));
  if (raw.empty()) return alpha;
  alpha(0) = raw[0];
  for (std::size_t k = 1; k < raw.size(); ++k) alpha(k) = alpha(k - 1) + softplus(raw[k]);
  return alpha;
}

Vector raw_from_intercepts(const Vector& alpha) {
  Vector raw(alpha.size());
  if (alpha.size() == 0) return raw;
  raw(0) = alpha(0);
  for (Eigen::Index k = 1; k < alpha.size(); ++k) {
    const double step = alpha(k) - alpha(k - 1);
    if (!(step > 0.0)) {
      throw std::invalid_argument("intercepts must be strictly increasing");
    }
    raw(k) = softplus_inverse(step);
  }
  return raw;
}

Vector raw_intercept_gradient(std::span<const double> raw, const Vector& d_alpha) {
  // alpha_k depends on raw_0 and on raw_m for every m <= k.
  const Eigen::Index n = d_alpha.size();
  Vector d_raw(n);
  double suffix = 0.0;
  for (Eigen::Index k = n - 1; k >= 0; --k) {
    suffix += d_alpha(k);
    d_raw(k) = k == 0 ? suffix : suffix * sigmoid(raw[k]);
  }
  return d_raw;
}

// -- constraints ----------------------------------------------------------------

Vector apply_constraints(const ModelSpec& spec, int item, const Vector& free_loadings) {
  if (free_loadings.size() != spec.free_loadings) {
    throw std::invalid_argument("free loading vector has wrong length");
  }
  if (item < 0 || item >= spec.items()) throw std::out_of_range("item index");
  return spec.loading_offset.row(item).transpose() + spec.loading_map[item] * free_loadings;
}

Matrix apply_constraints(const ModelSpec& spec, const Vector& free_loadings) {
  if (free_loadings.size() != spec.free_loadings) {
    throw std::invalid_argument("free loading vector has wrong length");
  }
  Matrix out = spec.loading_offset;
  for (int j = 0; j < spec.items(); ++j) {
    out.row(j).noalias() += (spec.loading_map[j] * free_loadings).transpose();
  }
  return out;
}

Vector constraint_gradient(const ModelSpec& spec, const Matrix& d_loadings) {
  if (d_loadings.rows() != spec.items() || d_loadings.cols() != spec.factors) {
    throw std::invalid_argument("loading gradient must be J x P");
  }
  Vector out = Vector::Zero(spec.free_loadings);
  for (int j = 0; j < spec.items(); ++j) {
    out.noalias() += spec.loading_map[j].transpose() * d_loadings.row(j).transpose();
  }
  return out;
}

Vector free_loadings_from(const ModelSpec& spec, const Matrix& loadings) {
  const int J = spec.items(), P = spec.factors, Q = spec.free_loadings;
  if (loadings.rows() != J || loadings.cols() != P) {
    throw std::invalid_argument("loadings must be J x P");
  }
  Matrix stacked(J * P, Q);
  Vector target(J * P);
  for (int j = 0; j < J; ++j) {
    stacked.middleRows(j * P, P) = spec.loading_map[j];
    target.segment(j * P, P) = (loadings.row(j) - spec.loading_offset.row(j)).transpose();
  }
  Vector free = Q > 0 ? Vector(stacked.colPivHouseholderQr().solve(target)) : Vector(0);
  const double residual = (stacked * free - target).norm();
  if (residual > 1e-9 * (1.0 + target.norm())) {
    throw std::invalid_argument("loadings violate the constraint pattern (residual " +
                                std::to_string(residual) + ")");
  }
  return free;
}

// -- correlation ----------------------------------------------------------------

double cos_angle(double theta) { return std::sin(kHalfPi - theta); }

Matrix cholesky_from_angles(const Matrix& theta) {
  const Eigen::Index P = theta.rows();
  Matrix L = Matrix::Zero(P, P);
  for (Eigen::Index p = 0; p < P; ++p) {
    double running = 1.0;  // prod_{k < c} sin(theta_{p,k})
    for (Eigen::Index c = 0; c < p; ++c) {
      L(p, c) = cos_angle(theta(p, c)) * running;
      running *= std::sin(theta(p, c));
    }
    L(p, p) = running;
  }
  return L;
}

CorrelationFactor build_correlation(const CorrelationAngles& angles) {
  const Matrix& theta = angles.theta;
  if (theta.rows() != theta.cols()) throw std::invalid_argument("angle matrix must be square");
  for (Eigen::Index p = 0; p < theta.rows(); ++p) {
    for (Eigen::Index c = 0; c < p; ++c) {
      const double a = theta(p, c);
      if (!(a > 0.0 && a <= std::numbers::pi)) {
        throw std::domain_error("angle (" + std::to_string(p) + ", " + std::to_string(c) +
                                ") = " + std::to_string(a) + " outside (0, pi]");
      }
    }
  }
  CorrelationFactor out;
  out.lower = cholesky_from_angles(theta);
  out.sigma = out.lower * out.lower.transpose();
  return out;
}

Matrix angle_gradient(const Matrix& theta, const Matrix& d_lower) {
  const Eigen::Index P = theta.rows();
  Matrix d_theta = Matrix::Zero(P, P);
  std::vector<double> cs(P), sn(P);
  for (Eigen::Index p = 1; p < P; ++p) {
    for (Eigen::Index k = 0; k < p; ++k) {
      cs[k] = cos_angle(theta(p, k));
      sn[k] = std::sin(theta(p, k));
    }
    // prod of sines over [0, upto) skipping index `skip`
    auto sine_product = [&](Eigen::Index upto, Eigen::Index skip) {
      double prod = 1.0;
      for (Eigen::Index m = 0; m < upto; ++m)
        if (m != skip) prod *= sn[m];
      return prod;
    };
    for (Eigen::Index k = 0; k < p; ++k) {
      double g = 0.0;
      // l_{p,c} = cos_c * prod_{m<c} sin_m for c < p
      g += d_lower(p, k) * (-sn[k] * sine_product(k, -1));
      for (Eigen::Index c = k + 1; c < p; ++c) {
        g += d_lower(p, c) * cs[c] * cs[k] * sine_product(c, k);
      }
      // l_{p,p} = prod_{m<p} sin_m
      g += d_lower(p, p) * cs[k] * sine_product(p, k);
      d_theta(p, k) = g;
    }
  }
  return d_theta;
}

Matrix angles_from_cholesky(const Matrix& lower) {
  const Eigen::Index P = lower.rows();
  Matrix theta = Matrix::Constant(P, P, kHalfPi);
  for (Eigen::Index p = 1; p < P; ++p) {
    double remaining = 1.0;
    for (Eigen::Index c = 0; c < p; ++c) {
      if (remaining < 1e-300) {
        theta(p, c) = kHalfPi;
        continue;
      }
      const double ratio = std::clamp(lower(p, c) / remaining, -1.0, 1.0);
      theta(p, c) = std::acos(ratio);
      remaining *= std::sin(theta(p, c));
    }
  }
  return theta;
}

CorrelationAngles angles_from_correlation(const Matrix& sigma) {
  if (sigma.rows() != sigma.cols()) throw std::invalid_argument("correlation must be square");
  for (Eigen::Index p = 0; p < sigma.rows(); ++p) {
    if (std::abs(sigma(p, p) - 1.0) > 1e-10) {
      throw std::invalid_argument("correlation matrix needs a unit diagonal");
    }
  }
  Eigen::LLT<Matrix> llt(sigma);
  if (llt.info() != Eigen::Success) {
    throw std::invalid_argument("correlation matrix is not positive definite");
  }
  return {angles_from_cholesky(llt.matrixL())};
}

Matrix assemble_angles(const ModelSpec& spec, const Vector& free_angles) {
  Matrix theta = spec.correlation.fixed;
  for (std::size_t i = 0; i < spec.correlation.free.size(); ++i) {
    auto [r, c] = spec.correlation.free[i];
    theta(r, c) = free_angles(static_cast<Eigen::Index>(i));
  }
  return theta;
}

Vector canonical_free_angles(const ModelSpec& spec, const Vector& free_angles) {
  const Matrix theta = assemble_angles(spec, free_angles);
  Matrix L = cholesky_from_angles(theta);
  for (Eigen::Index c = 0; c < L.cols(); ++c)
    if (L(c, c) < 0.0) L.col(c) *= -1.0;
  const Matrix canon = angles_from_cholesky(L);
  std::set<std::pair<int, int>> is_free(spec.correlation.free.begin(),
                                        spec.correlation.free.end());
  for (int r = 0; r < spec.factors; ++r) {
    for (int c = 0; c < r; ++c) {
      if (!is_free.count({r, c}) && std::abs(canon(r, c) - theta(r, c)) > 1e-12) {
        return free_angles;
      }
    }
  }
  Vector out(free_angles.size());
  for (std::size_t i = 0; i < spec.correlation.free.size(); ++i) {
    auto [r, c] = spec.correlation.free[i];
    out(static_cast<Eigen::Index>(i)) = canon(r, c);
  }
  return out;
}

// -- sampling -------------------------------------------------------------------

namespace {

int draw_category(const Vector& alpha, double eta, double u) {
  // Boundaries decrease in k, so the category is the number of boundaries
  // whose probability exceeds u.
  int x = 0;
  for (Eigen::Index k = 0; k < alpha.size(); ++k) {
    if (u < sigmoid(-(alpha(k) + eta))) {
      x = static_cast<int>(k) + 1;
    } else {
      break;
    }
  }
  return x;
}

ResponseMatrix sample_with_factor(const std::vector<Vector>& intercepts,
                                  const Matrix& loadings, const Matrix& factor, int n,
                                  std::uint64_t seed) {
  if (n < 0) throw std::invalid_argument("sample size must be >= 0");
  const int J = static_cast<int>(intercepts.size());
  const Eigen::Index P = factor.rows();
  Rng rng(seed);
  std::normal_distribution<double> normal;
  std::uniform_real_distribution<double> uniform;
  ResponseMatrix out(n, J);
  Vector eps(P);
  for (int i = 0; i < n; ++i) {
    for (Eigen::Index p = 0; p < P; ++p) eps(p) = normal(rng);
    const Vector z = factor * eps;
    const Vector eta = loadings * z;
    for (int j = 0; j < J; ++j) out(i, j) = draw_category(intercepts[j], eta(j), uniform(rng));
  }
  return out;
}

}  // namespace

ResponseMatrix sample_responses(const Model& model, int n, std::uint64_t seed) {
  return sample_with_factor(model.intercepts, model.loadings, model.correlation.lower, n,
                            seed);
}

ResponseMatrix sample_responses(const std::vector<Item>& items, const Matrix& sigma, int n,
                                std::uint64_t seed) {
  const Eigen::Index P = sigma.rows();
  if (sigma.cols() != P) throw std::invalid_argument("correlation must be square");
  Eigen::SelfAdjointEigenSolver<Matrix> eig(sigma);
  if (eig.info() != Eigen::Success) throw std::invalid_argument("eigendecomposition failed");
  const double scale = std::max(1.0, eig.eigenvalues().cwiseAbs().maxCoeff());
  if (P > 0 && eig.eigenvalues().minCoeff() < -1e-10 * scale) {
    throw std::invalid_argument("correlation matrix is not positive semidefinite");
  }
  Matrix factor = eig.eigenvectors() *
                  eig.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal();
  std::vector<Vector> intercepts;
  Matrix loadings(static_cast<Eigen::Index>(items.size()), P);
  for (std::size_t j = 0; j < items.size(); ++j) {
    if (items[j].loadings.size() != P) {
      throw std::invalid_argument(item_label(static_cast<int>(j)) +
                                  ": loading length differs from factor count");
    }
    intercepts.push_back(items[j].intercepts);
    loadings.row(static_cast<Eigen::Index>(j)) = items[j].loadings.transpose();
  }
  return sample_with_factor(intercepts, loadings, factor, n, seed);
}

void validate_responses(const ResponseMatrix& data, const std::vector<int>& categories) {
  if (data.cols() != static_cast<Eigen::Index>(categories.size())) {
    throw std::invalid_argument("data has " + std::to_string(data.cols()) +
                                " columns but the spec has " +
                                std::to_string(categories.size()) + " items");
  }
  for (Eigen::Index i = 0; i < data.rows(); ++i) {
    for (Eigen::Index j = 0; j < data.cols(); ++j) {
      const int x = data(i, j);
      if (x < 0 || x >= categories[j]) {
        throw std::out_of_range("row " + std::to_string(i) + ", " +
                                item_label(static_cast<int>(j)) + ": code " +
                                std::to_string(x) + " outside 0.." +
                                std::to_string(categories[j] - 1));
      }
    }
  }
}

std::vector<Vector> zero_factor_mle(const ResponseMatrix& data,
                                    const std::vector<int>& categories) {
  if (data.rows() == 0) throw std::invalid_argument("cannot estimate proportions from empty data");
  validate_responses(data, categories);
  std::vector<Vector> out;
  const double n = static_cast<double>(data.rows());
  for (std::size_t j = 0; j < categories.size(); ++j) {
    Vector counts = Vector::Zero(categories[j]);
    for (Eigen::Index i = 0; i < data.rows(); ++i) counts(data(i, j)) += 1.0;
    out.push_back(counts / n);
  }
  return out;
}

ResponseMatrix sample_baseline(const std::vector<Vector>& proportions, int n,
                               std::uint64_t seed) {
  if (n < 0) throw std::invalid_argument("sample size must be >= 0");
  const int J = static_cast<int>(proportions.size());
  std::vector<Vector> cumulative;
  for (int j = 0; j < J; ++j) {
    const Vector& p = proportions[j];
    if (p.size() < 1 || (p.array() < 0.0).any() || std::abs(p.sum() - 1.0) > 1e-9) {
      throw std::invalid_argument(item_label(j) + ": proportions must be a distribution");
    }
    Vector c(p.size());
    double run = 0.0;
    for (Eigen::Index k = 0; k < p.size(); ++k) c(k) = (run += p(k));
    c(p.size() - 1) = 1.0;
    cumulative.push_back(std::move(c));
  }
  Rng rng(seed);
  std::uniform_real_distribution<double> uniform;
  ResponseMatrix out(n, J);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < J; ++j) {
      const double u = uniform(rng);
      const Vector& c = cumulative[j];
      int k = 0;
      while (k < c.size() - 1 && !(u < c(k))) ++k;
      out(i, j) = k;
    }
  }
  return out;
}

}  // namespace cifa
