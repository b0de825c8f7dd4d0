#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "cifa/grm.hpp"
#include "test_util.hpp"

using namespace cifa;
using namespace cifa::testing;

namespace {

constexpr double kHalfPi = std::numbers::pi / 2.0;

Item make_item(std::vector<double> alpha, std::vector<double> beta) {
  Item it;
  it.intercepts = Eigen::Map<Vector>(alpha.data(), static_cast<Eigen::Index>(alpha.size()));
  it.loadings = Eigen::Map<Vector>(beta.data(), static_cast<Eigen::Index>(beta.size()));
  return it;
}

double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Direct multinomial evaluation: product over items of the probability of the
// observed category, formed from boundary differences.
double brute_force_log_likelihood(const Model& m, std::span<const int> x, const Vector& z) {
  double prod = 1.0;
  for (int j = 0; j < m.items(); ++j) {
    const Vector& a = m.intercepts[j];
    const double eta = m.loadings.row(j).dot(z);
    const int k = x[j];
    const double upper = k == 0 ? 1.0 : logistic(-(a(k - 1) + eta));
    const double lower = k == a.size() ? 0.0 : logistic(-(a(k) + eta));
    prod *= upper - lower;
  }
  return std::log(prod);
}

}  // namespace

// -- item response functions ---------------------------------------------------------

TEST(BoundaryProbs, LogisticAtZero) {
  const Vector b = boundary_probs(make_item({0.0}, {0.0}), Vector::Zero(1));
  EXPECT_DOUBLE_EQ(b(1), 0.5);
}

TEST(BoundaryProbs, EndpointsAreOneAndZero) {
  Rng rng(3);
  for (int t = 0; t < 50; ++t) {
    const Vector alpha = (uniform_vector(4, -3, 3, rng).array()).matrix();
    Vector sorted = alpha;
    std::sort(sorted.begin(), sorted.end());
    Item it{sorted, normal_vector(2, rng)};
    const Vector b = boundary_probs(it, normal_vector(2, rng));
    ASSERT_EQ(b.size(), 6);
    EXPECT_EQ(b(0), 1.0);
    EXPECT_EQ(b(5), 0.0);
    for (int k = 1; k < 6; ++k) EXPECT_LE(b(k), b(k - 1));
  }
}

TEST(BoundaryProbs, SaturatesForLargeIntercept) {
  const Vector b = boundary_probs(make_item({20.0}, {0.0}), Vector::Zero(1));
  EXPECT_LT(b(1), 1e-8);
  EXPECT_GT(b(1), 0.0);
}

TEST(BoundaryProbs, RejectsLatentDimensionMismatch) {
  EXPECT_THROW(boundary_probs(make_item({0.0}, {1.0, 1.0}), Vector::Zero(3)),
               std::invalid_argument);
}

TEST(CategoryProbs, BinaryCollapse) {
  const Item it = make_item({-0.7}, {0.4});
  const Vector z = Vector::Constant(1, 0.3);
  const double p = boundary_probs(it, z)(1);
  const Vector pi = category_probs(it, z);
  ASSERT_EQ(pi.size(), 2);
  EXPECT_NEAR(pi(0), 1.0 - p, 1e-15);
  EXPECT_NEAR(pi(1), p, 1e-15);
}

TEST(CategoryProbs, SymmetricInterceptsGiveEqualTails) {
  const Vector pi = category_probs(make_item({-1.3, 1.3}, {0.0}), Vector::Zero(1));
  EXPECT_NEAR(pi(0), pi(2), 1e-15);
}

TEST(CategoryProbs, SumToOne) {
  Rng rng(5);
  for (int t = 0; t < 200; ++t) {
    Vector a = uniform_vector(3, -4, 4, rng);
    std::sort(a.begin(), a.end());
    const Vector pi = category_probs(Item{a, normal_vector(3, rng)}, normal_vector(3, rng, 2.0));
    EXPECT_NEAR(pi.sum(), 1.0, 1e-14);
    EXPECT_TRUE((pi.array() >= 0.0).all());
  }
}

TEST(LogCategoryProb, MatchesLogOfProbabilities) {
  Rng rng(7);
  for (int t = 0; t < 100; ++t) {
    Vector a = uniform_vector(3, -3, 3, rng);
    std::sort(a.begin(), a.end());
    const double eta = std::normal_distribution<double>(0, 2)(rng);
    const Vector pi = category_probs(Item{a, Vector::Constant(1, 1.0)}, Vector::Constant(1, eta));
    for (int k = 0; k < 4; ++k) {
      double dl = 0, du = 0;
      EXPECT_NEAR(log_category_prob({a.data(), 3}, k, eta, dl, du), std::log(pi(k)), 1e-12);
    }
  }
}

TEST(LogCategoryProb, StaysFiniteInTheTails) {
  const std::vector<double> a{-1.0, 1.0};
  for (double eta : {-800.0, -60.0, 60.0, 800.0}) {
    for (int k = 0; k < 3; ++k) {
      double dl = 0, du = 0;
      const double v = log_category_prob(a, k, eta, dl, du);
      EXPECT_FALSE(std::isnan(v));
      EXPECT_LE(v, 0.0);
      EXPECT_TRUE(std::isfinite(dl) && std::isfinite(du));
    }
  }
  // Middle category with adjacent boundaries far out still resolves its log mass.
  double dl = 0, du = 0;
  const double v = log_category_prob(a, 1, 40.0, dl, du);
  EXPECT_TRUE(std::isfinite(v));
  EXPECT_NEAR(v, -39.0 + std::log1p(-std::exp(-2.0)), 1e-9);
}

TEST(LogCategoryProb, DerivativesMatchFiniteDifferences) {
  const std::vector<double> a{-0.8, 0.3, 1.7};
  for (int k = 0; k < 4; ++k) {
    double dl = 0, du = 0;
    log_category_prob(a, k, 0.4, dl, du);
    auto f = [&](const Vector& v) {
      double l = 0, u = 0;
      return log_category_prob({v.data(), 3}, k, 0.4, l, u);
    };
    const Vector g = numeric_gradient(f, Eigen::Map<const Vector>(a.data(), 3));
    const double lower = k >= 1 ? g(k - 1) : 0.0;
    const double upper = k <= 2 ? g(k) : 0.0;
    EXPECT_NEAR(dl, lower, 1e-8);
    EXPECT_NEAR(du, upper, 1e-8);
  }
}

TEST(LogCondLikelihood, SingleBinaryItemAtHalf) {
  ModelSpec spec = simple_structure({2}, {0}, 1);
  ParameterSet p{Vector::Zero(1), Vector::Zero(1), Vector()};
  const Model m = materialize(spec, p);
  for (int x : {0, 1}) {
    EXPECT_NEAR(log_cond_likelihood(m, std::vector<int>{x}, Vector::Zero(1)), std::log(0.5),
                1e-15);
  }
}

TEST(LogCondLikelihood, FactorizesOverItems) {
  Rng rng(11);
  const ModelSpec spec = random_spec(2, 1, rng);
  const Model m = materialize(spec, random_params(spec, rng));
  const Vector z = normal_vector(1, rng);
  const std::vector<int> x{1, 0};
  double dl = 0, du = 0;
  double sum = 0.0;
  for (int j = 0; j < 2; ++j) {
    sum += log_category_prob({m.intercepts[j].data(), static_cast<std::size_t>(m.intercepts[j].size())},
                             x[j], m.loadings.row(j).dot(z), dl, du);
  }
  EXPECT_NEAR(log_cond_likelihood(m, x, z), sum, 1e-14);
}

TEST(LogCondLikelihood, MatchesBruteForceProduct) {
  Rng rng(13);
  for (int t = 0; t < 30; ++t) {
    const ModelSpec spec = random_spec(5, 2, rng);
    const Model m = materialize(spec, random_params(spec, rng));
    const ResponseMatrix x = random_responses(spec.categories, 1, rng);
    const Vector z = normal_vector(2, rng);
    std::vector<int> row(x.data(), x.data() + x.cols());
    EXPECT_NEAR(log_cond_likelihood(m, row, z), brute_force_log_likelihood(m, row, z), 1e-10);
  }
}

TEST(LogCondLikelihood, RejectsBadCodesAndShapes) {
  const ModelSpec spec = simple_structure({3, 3}, {0, 0}, 1);
  ParameterSet p{Vector::Zero(4), Vector::Zero(2), Vector()};
  p.intercepts << -1, 0, -1, 0;
  const Model m = materialize(spec, p);
  EXPECT_THROW(log_cond_likelihood(m, std::vector<int>{0, 3}, Vector::Zero(1)), std::out_of_range);
  EXPECT_THROW(log_cond_likelihood(m, std::vector<int>{-1, 0}, Vector::Zero(1)), std::out_of_range);
  EXPECT_THROW(log_cond_likelihood(m, std::vector<int>{0}, Vector::Zero(1)), std::invalid_argument);
  EXPECT_THROW(log_cond_likelihood(m, std::vector<int>{0, 0}, Vector::Zero(2)),
               std::invalid_argument);
}

// Gradients w.r.t. raw intercepts, free loadings and z against central
// differences of the composed map.
TEST(LogCondLikelihood, GradientsMatchFiniteDifferences) {
  Rng rng(17);
  for (int t = 0; t < 20; ++t) {
    const int P = 1 + t % 3;
    const ModelSpec spec = random_spec(2 + t % 5, P, rng);
    const ParameterSet base = random_params(spec, rng);
    const Model m = materialize(spec, base);
    const ResponseMatrix xm = random_responses(spec.categories, 1, rng);
    const std::vector<int> x(xm.data(), xm.data() + xm.cols());
    const Vector z = normal_vector(P, rng);

    LikelihoodGradient g(m);
    const double value = log_cond_likelihood(m, x, z, g);
    EXPECT_NEAR(value, log_cond_likelihood(m, x, z), 1e-13);

    Vector d_raw(spec.intercept_count());
    const auto offsets = spec.intercept_offsets();
    for (int j = 0; j < spec.items(); ++j) {
      const int len = spec.categories[j] - 1;
      d_raw.segment(offsets[j], len) = raw_intercept_gradient(
          {base.intercepts.data() + offsets[j], static_cast<std::size_t>(len)}, g.intercepts[j]);
    }
    auto f_raw = [&](const Vector& raw) {
      ParameterSet p = base;
      p.intercepts = raw;
      return log_cond_likelihood(materialize(spec, p), x, z);
    };
    EXPECT_LT(relative_error(d_raw, numeric_gradient(f_raw, base.intercepts)), 1e-4);

    auto f_beta = [&](const Vector& beta) {
      ParameterSet p = base;
      p.loadings = beta;
      return log_cond_likelihood(materialize(spec, p), x, z);
    };
    EXPECT_LT(relative_error(constraint_gradient(spec, g.loadings),
                             numeric_gradient(f_beta, base.loadings)),
              1e-4);

    auto f_z = [&](const Vector& zz) { return log_cond_likelihood(m, x, zz); };
    EXPECT_LT(relative_error(g.z, numeric_gradient(f_z, z)), 1e-4);
  }
}

// -- intercept reparameterization ------------------------------------------------------

TEST(Softplus, StableAndInvertible) {
  EXPECT_NEAR(softplus(0.0), std::log(2.0), 1e-15);
  EXPECT_EQ(softplus(1000.0), 1000.0);
  EXPECT_GT(softplus(-800.0), -1.0);
  EXPECT_GE(softplus(-800.0), 0.0);
  EXPECT_EQ(sigmoid(1000.0), 1.0);
  EXPECT_EQ(sigmoid(-1000.0), 0.0);
  for (double x : {1e-8, 0.1, 1.0, 5.0, 40.0, 300.0})
    EXPECT_NEAR(softplus(softplus_inverse(x)), x, 1e-12 * std::max(1.0, x));
  EXPECT_THROW(softplus_inverse(0.0), std::invalid_argument);
  EXPECT_THROW(softplus_inverse(-1.0), std::invalid_argument);
}

TEST(InterceptMap, IncreasingForAnyRaw) {
  Rng rng(19);
  for (int t = 0; t < 100; ++t) {
    const Vector raw = normal_vector(5, rng, 3.0);
    const Vector a = intercepts_from_raw({raw.data(), 5});
    EXPECT_EQ(a(0), raw(0));
    for (int k = 1; k < 5; ++k) EXPECT_GT(a(k), a(k - 1));
    const Vector back = raw_from_intercepts(a);
    // d far below zero loses precision through softplus; compare where resolvable.
    for (int k = 1; k < 5; ++k) {
      if (raw(k) > -5.0) {
        EXPECT_NEAR(back(k), raw(k), 1e-8);
      }
    }
  }
}

TEST(InterceptMap, RejectsNonIncreasing) {
  Vector a(3);
  a << 0.0, 1.0, 1.0;
  EXPECT_THROW(raw_from_intercepts(a), std::invalid_argument);
}

TEST(InterceptMap, GradientMatchesFiniteDifferences) {
  Rng rng(23);
  const Vector raw = normal_vector(4, rng);
  const Vector w = normal_vector(4, rng);
  auto f = [&](const Vector& r) { return w.dot(intercepts_from_raw({r.data(), 4})); };
  EXPECT_LT(relative_error(raw_intercept_gradient({raw.data(), 4}, w), numeric_gradient(f, raw)),
            1e-6);
}

// -- loading constraints ----------------------------------------------------------------

namespace {

ModelSpec explicit_spec(Matrix b, std::vector<Matrix> A, int Q) {
  ModelSpec s;
  const int J = static_cast<int>(b.rows());
  s.categories.assign(J, 2);
  s.factors = static_cast<int>(b.cols());
  s.loading_offset = std::move(b);
  s.loading_map = std::move(A);
  s.free_loadings = Q;
  s.correlation.fixed = Matrix::Constant(s.factors, s.factors, kHalfPi);
  return s;
}

}  // namespace

TEST(Constraints, IdentityMap) {
  const ModelSpec s = explicit_spec(Matrix::Zero(1, 3), {Matrix::Identity(3, 3)}, 3);
  Vector beta(3);
  beta << 0.1, -0.2, 0.3;
  EXPECT_EQ(apply_constraints(s, 0, beta), beta);
}

TEST(Constraints, ZeroMapGivesOffset) {
  Matrix b(1, 2);
  b << 0.7, -1.1;
  const ModelSpec s = explicit_spec(b, {Matrix::Zero(2, 1)}, 1);
  EXPECT_EQ(apply_constraints(s, 0, Vector::Constant(1, 5.0)), b.row(0).transpose());
}

TEST(Constraints, TieGroupDuplicatesOneFreeParameter) {
  using K = LoadingEntry::Kind;
  std::vector<std::vector<LoadingEntry>> pattern{
      {{K::free, 0, {}}, {K::fixed, 0, {}}},
      {{K::free, 0, {}}, {K::tied, 0, "d"}},
      {{K::free, 0, {}}, {K::tied, 0, "d"}},
  };
  CorrelationStructure corr{{}, Matrix::Constant(2, 2, kHalfPi)};
  const ModelSpec s = compile_loading_pattern({3, 3, 3}, 2, pattern, corr);
  EXPECT_EQ(s.free_loadings, 4);
  Vector beta(4);
  beta << 1.0, 2.0, 3.0, 4.0;
  const Matrix L = apply_constraints(s, beta);
  EXPECT_EQ(L(1, 1), L(2, 1));
  EXPECT_NE(L(1, 1), 0.0);
  EXPECT_EQ(L(0, 1), 0.0);
}

TEST(Constraints, FixedNonzeroLoadingsLandInOffset) {
  using K = LoadingEntry::Kind;
  std::vector<std::vector<LoadingEntry>> pattern{{{K::fixed, 1.25, {}}}, {{K::free, 0, {}}}};
  const ModelSpec s = compile_loading_pattern({2, 2}, 1, pattern, {{}, Matrix::Constant(1, 1, kHalfPi)});
  EXPECT_EQ(s.free_loadings, 1);
  const Matrix L = apply_constraints(s, Vector::Constant(1, -0.5));
  EXPECT_EQ(L(0, 0), 1.25);
  EXPECT_EQ(L(1, 0), -0.5);
}

TEST(Constraints, GradientIsTransposeSum) {
  Rng rng(29);
  const ModelSpec s = random_spec(6, 3, rng);
  const Matrix D = Matrix::Random(6, 3);
  Vector expected = Vector::Zero(s.free_loadings);
  for (int j = 0; j < 6; ++j) expected += s.loading_map[j].transpose() * D.row(j).transpose();
  EXPECT_LT((constraint_gradient(s, D) - expected).norm(), 1e-14);
}

TEST(Constraints, FreeLoadingsRoundTripAndViolations) {
  Rng rng(31);
  const ModelSpec s = random_spec(6, 2, rng);
  const Vector beta = normal_vector(s.free_loadings, rng);
  const Matrix L = apply_constraints(s, beta);
  EXPECT_LT((free_loadings_from(s, L) - beta).norm(), 1e-12);
  Matrix bad = L;
  bool changed = false;
  for (int j = 0; j < 6 && !changed; ++j)
    for (int p = 0; p < 2 && !changed; ++p)
      if (!s.loading_map[j].row(p).any()) {
        bad(j, p) = 1.0;
        changed = true;
      }
  if (changed) {
    EXPECT_THROW(free_loadings_from(s, bad), std::invalid_argument);
  }
  EXPECT_THROW(apply_constraints(s, Vector::Zero(s.free_loadings + 1)), std::invalid_argument);
}

TEST(SpecValidation, RejectsInconsistentSpecs) {
  ModelSpec s = simple_structure({3, 3, 3}, {0, 1, 1}, 2);
  EXPECT_NO_THROW(s.validate());
  ModelSpec bad = s;
  bad.categories[0] = 1;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
  bad = s;
  bad.loading_map.pop_back();
  EXPECT_THROW(bad.validate(), std::invalid_argument);
  bad = s;
  bad.correlation.free.push_back(bad.correlation.free[0]);
  EXPECT_THROW(bad.validate(), std::invalid_argument);
  bad = s;
  bad.correlation.free = {{0, 1}};
  EXPECT_THROW(bad.validate(), std::invalid_argument);
  bad = s;
  bad.correlation.free.clear();
  bad.correlation.fixed(1, 0) = 0.0;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
  EXPECT_THROW(simple_structure({3, 3}, {0, 2}, 2), std::invalid_argument);
  EXPECT_THROW(simple_structure({3, 3}, {0}, 2), std::invalid_argument);
}

TEST(SpecValidation, ParameterCountsFollowTheSpec) {
  const ModelSpec s = simple_structure(std::vector<int>(50, 5), std::vector<int>(50, 0), 1);
  EXPECT_EQ(s.intercept_count(), 200);
  EXPECT_EQ(zero_factor_spec(std::vector<int>(50, 5)).intercept_count(), 200);
  const ModelSpec s2 = simple_structure({2, 4, 3}, {0, 0, 0}, 1);
  EXPECT_EQ(s2.intercept_offsets(), (std::vector<int>{0, 1, 4}));
  EXPECT_THROW(materialize(s2, ParameterSet{Vector::Zero(5), Vector::Zero(3), Vector()}),
               std::invalid_argument);
}

// -- hyperspherical correlation ----------------------------------------------------------

TEST(Hypersphere, RightAnglesGiveIdentityExactly) {
  for (int P : {1, 2, 3, 6}) {
    const Matrix theta = Matrix::Constant(P, P, kHalfPi);
    const CorrelationFactor f = build_correlation({theta});
    EXPECT_TRUE(f.lower.isApprox(Matrix::Identity(P, P), 0.0) ||
                (f.lower - Matrix::Identity(P, P)).cwiseAbs().maxCoeff() == 0.0);
    EXPECT_EQ((f.sigma - Matrix::Identity(P, P)).cwiseAbs().maxCoeff(), 0.0);
  }
  EXPECT_EQ(cos_angle(kHalfPi), 0.0);
}

TEST(Hypersphere, ThirdOfPiHandEvaluation) {
  Matrix theta = Matrix::Constant(2, 2, kHalfPi);
  theta(1, 0) = std::numbers::pi / 3.0;
  const CorrelationFactor f = build_correlation({theta});
  EXPECT_NEAR(f.lower(1, 0), 0.5, 1e-15);
  EXPECT_NEAR(f.lower(1, 1), std::sqrt(3.0) / 2.0, 1e-15);
  EXPECT_NEAR(f.sigma(0, 1), 0.5, 1e-15);
}

TEST(Hypersphere, SingleFactor) {
  const CorrelationFactor f = build_correlation({Matrix::Constant(1, 1, 0.0)});
  EXPECT_EQ(f.lower(0, 0), 1.0);
  EXPECT_EQ(f.sigma(0, 0), 1.0);
}

TEST(Hypersphere, RejectsAnglesOutsideDomain) {
  Matrix theta = Matrix::Constant(3, 3, kHalfPi);
  theta(2, 1) = 0.0;
  EXPECT_THROW(build_correlation({theta}), std::domain_error);
  theta(2, 1) = 3.2;
  EXPECT_THROW(build_correlation({theta}), std::domain_error);
  theta(2, 1) = std::numbers::pi;
  EXPECT_NO_THROW(build_correlation({theta}));
}

TEST(Hypersphere, RandomAnglesGiveCorrelationMatrices) {
  Rng rng(37);
  std::uniform_real_distribution<double> u(1e-3, std::numbers::pi);
  for (int t = 0; t < 200; ++t) {
    const int P = 2 + t % 5;
    Matrix theta = Matrix::Zero(P, P);
    for (int r = 1; r < P; ++r)
      for (int c = 0; c < r; ++c) theta(r, c) = u(rng);
    const CorrelationFactor f = build_correlation({theta});
    for (int p = 0; p < P; ++p) EXPECT_NEAR(f.sigma(p, p), 1.0, 1e-12);
    Eigen::SelfAdjointEigenSolver<Matrix> eig(f.sigma);
    EXPECT_GT(eig.eigenvalues().minCoeff(), -1e-12);
  }
}

TEST(Hypersphere, AngleGradientMatchesFiniteDifferences) {
  Rng rng(41);
  for (int P : {2, 3, 4}) {
    Matrix theta = Matrix::Zero(P, P);
    for (int r = 1; r < P; ++r)
      for (int c = 0; c < r; ++c) theta(r, c) = std::uniform_real_distribution<double>(0.3, 2.8)(rng);
    Matrix W = Matrix::Random(P, P).triangularView<Eigen::Lower>();
    const Matrix g = angle_gradient(theta, W);
    for (int r = 1; r < P; ++r) {
      for (int c = 0; c < r; ++c) {
        const double h = 1e-6;
        Matrix up = theta, down = theta;
        up(r, c) += h;
        down(r, c) -= h;
        const double fd = ((W.array() * cholesky_from_angles(up).array()).sum() -
                           (W.array() * cholesky_from_angles(down).array()).sum()) /
                          (2 * h);
        EXPECT_NEAR(g(r, c), fd, 1e-8 * std::max(1.0, std::abs(fd)));
      }
    }
  }
}

TEST(Hypersphere, AnglesFromCorrelationRoundTrip) {
  Rng rng(43);
  for (int t = 0; t < 50; ++t) {
    const int P = 2 + t % 4;
    Matrix theta = Matrix::Zero(P, P);
    for (int r = 1; r < P; ++r)
      for (int c = 0; c < r; ++c) theta(r, c) = std::uniform_real_distribution<double>(0.2, 2.9)(rng);
    const Matrix sigma = build_correlation({theta}).sigma;
    const Matrix back = build_correlation(angles_from_correlation(sigma)).sigma;
    EXPECT_LT((back - sigma).cwiseAbs().maxCoeff(), 1e-10);
  }
  Matrix not_pd(2, 2);
  not_pd << 1, 1.5, 1.5, 1;
  EXPECT_THROW(angles_from_correlation(not_pd), std::invalid_argument);
}

TEST(Hypersphere, CanonicalAnglesPreserveSigma) {
  Rng rng(47);
  const ModelSpec s = random_spec(4, 3, rng);
  for (int t = 0; t < 30; ++t) {
    const Vector free = normal_vector(3, rng, 4.0);
    // cholesky_from_angles accepts any reals; build_correlation needs (0, pi].
    const Matrix raw_sigma = [&] {
      const Matrix L = cholesky_from_angles(assemble_angles(s, free));
      return Matrix(L * L.transpose());
    }();
    const Vector canon = canonical_free_angles(s, free);
    for (Eigen::Index i = 0; i < canon.size(); ++i) {
      EXPECT_GT(canon(i), 0.0);
      EXPECT_LE(canon(i), std::numbers::pi);
    }
    const Matrix after = build_correlation({assemble_angles(s, canon)}).sigma;
    EXPECT_LT((after - raw_sigma).cwiseAbs().maxCoeff(), 1e-12);
  }
}

// -- sampling ---------------------------------------------------------------------------

TEST(Sampling, ZeroLoadingsReproduceInterceptProbabilities) {
  const ModelSpec s = simple_structure({3, 3}, {0, 1}, 2);
  Vector alpha(2);
  alpha << -0.5, 1.0;
  ParameterSet p;
  p.intercepts.resize(4);
  p.intercepts << raw_from_intercepts(alpha), raw_from_intercepts(alpha);
  p.loadings = Vector::Zero(2);
  p.angles = Vector::Constant(1, 1.0);
  const int N = 20000;
  const ResponseMatrix x = sample_responses(materialize(s, p), N, 5);
  const double expect[3] = {1 - logistic(0.5), logistic(0.5) - logistic(-1.0), logistic(-1.0)};
  for (int j = 0; j < 2; ++j) {
    for (int k = 0; k < 3; ++k) {
      const double freq = (x.col(j).array() == k).cast<double>().mean();
      EXPECT_NEAR(freq, expect[k], 3 * std::sqrt(expect[k] * (1 - expect[k]) / N));
    }
  }
}

TEST(Sampling, DeterministicPerSeed) {
  Rng rng(53);
  const ModelSpec s = random_spec(5, 2, rng);
  const Model m = materialize(s, random_params(s, rng));
  EXPECT_EQ(sample_responses(m, 100, 9), sample_responses(m, 100, 9));
  EXPECT_NE(sample_responses(m, 100, 9), sample_responses(m, 100, 10));
}

TEST(Sampling, EmptyAndInvalidRequests) {
  const ModelSpec s = simple_structure({2, 2}, {0, 0}, 1);
  const Model m = materialize(s, ParameterSet{Vector::Zero(2), Vector::Ones(2), Vector()});
  const ResponseMatrix x = sample_responses(m, 0, 1);
  EXPECT_EQ(x.rows(), 0);
  EXPECT_EQ(x.cols(), 2);
  EXPECT_THROW(sample_responses(m, -1, 1), std::invalid_argument);
  Matrix not_psd(1, 1);
  not_psd << -1.0;
  EXPECT_THROW(sample_responses({m.item(0), m.item(1)}, not_psd, 10, 1), std::invalid_argument);
}

TEST(Sampling, ExplicitSigmaMatchesModelSampler) {
  Rng rng(59);
  const ModelSpec s = random_spec(4, 2, rng);
  const Model m = materialize(s, random_params(s, rng));
  std::vector<Item> items;
  for (int j = 0; j < 4; ++j) items.push_back(m.item(j));
  const int N = 20000;
  const ResponseMatrix a = sample_responses(m, N, 1);
  const ResponseMatrix b = sample_responses(items, m.correlation.sigma, N, 2);
  for (int j = 0; j < 4; ++j) {
    for (int k = 0; k < s.categories[j]; ++k) {
      const double fa = (a.col(j).array() == k).cast<double>().mean();
      const double fb = (b.col(j).array() == k).cast<double>().mean();
      EXPECT_NEAR(fa, fb, 4 * std::sqrt(0.25 * 2.0 / N));
    }
  }
}

TEST(ZeroFactor, CountsCategories) {
  ResponseMatrix x(4, 1);
  x << 0, 0, 1, 2;
  const auto p = zero_factor_mle(x, {3});
  EXPECT_DOUBLE_EQ(p[0](0), 0.5);
  EXPECT_DOUBLE_EQ(p[0](1), 0.25);
  EXPECT_DOUBLE_EQ(p[0](2), 0.25);
}

TEST(ZeroFactor, ConstantColumnGivesIndicator) {
  const ResponseMatrix x = ResponseMatrix::Constant(7, 1, 2);
  const auto p = zero_factor_mle(x, {4});
  EXPECT_EQ(p[0], (Vector(4) << 0, 0, 1, 0).finished());
}

TEST(ZeroFactor, UniformColumnNearUniform) {
  Rng rng(61);
  const int N = 40000;
  const ResponseMatrix x = random_responses({5}, N, rng);
  const auto p = zero_factor_mle(x, {5});
  for (int k = 0; k < 5; ++k) EXPECT_NEAR(p[0](k), 0.2, 4 * std::sqrt(0.16 / N));
}

TEST(ZeroFactor, RejectsEmptyAndInvalidData) {
  EXPECT_THROW(zero_factor_mle(ResponseMatrix(0, 2), {2, 2}), std::invalid_argument);
  ResponseMatrix x(1, 1);
  x << 3;
  EXPECT_THROW(zero_factor_mle(x, {3}), std::out_of_range);
}

TEST(Baseline, IndicatorGivesConstantColumn) {
  const std::vector<Vector> p{(Vector(3) << 0, 1, 0).finished()};
  const ResponseMatrix x = sample_baseline(p, 50, 3);
  EXPECT_TRUE((x.array() == 1).all());
}

TEST(Baseline, DeterministicAndMatchesProportions) {
  const std::vector<Vector> p{(Vector(3) << 0.2, 0.5, 0.3).finished(),
                              (Vector(2) << 0.9, 0.1).finished()};
  EXPECT_EQ(sample_baseline(p, 30, 4), sample_baseline(p, 30, 4));
  const int N = 30000;
  const ResponseMatrix x = sample_baseline(p, N, 5);
  for (int j = 0; j < 2; ++j)
    for (Eigen::Index k = 0; k < p[j].size(); ++k) {
      const double f = (x.col(j).array() == k).cast<double>().mean();
      EXPECT_NEAR(f, p[j](k), 3 * std::sqrt(p[j](k) * (1 - p[j](k)) / N));
    }
  EXPECT_THROW(sample_baseline({(Vector(2) << 0.6, 0.6).finished()}, 5, 1), std::invalid_argument);
}
