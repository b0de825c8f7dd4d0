#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <numeric>

#include "cifa/iwave.hpp"
#include "test_util.hpp"

using namespace cifa;
using namespace cifa::testing;

namespace {

constexpr double kHalfPi = std::numbers::pi / 2.0;

std::vector<int> all_rows(const ResponseMatrix& x) {
  std::vector<int> rows(static_cast<std::size_t>(x.rows()));
  std::iota(rows.begin(), rows.end(), 0);
  return rows;
}

InferenceNet zero_net(const ModelSpec& spec, std::vector<int> hidden = {3}) {
  InferenceNet net(spec.categories, spec.factors, std::move(hidden));
  net.parameters().setZero();
  return net;
}

// log N(z | 0, Sigma) through a dense factorization.
double log_mvn(const Vector& z, const Matrix& sigma) {
  Eigen::LLT<Matrix> llt(sigma);
  const Vector u = llt.matrixL().solve(z);
  const double log_det = 2.0 * llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
  return -0.5 * (z.size() * std::log(2 * std::numbers::pi) + log_det + u.squaredNorm());
}

// log p(x) for P = 1 by composite Simpson integration over z.
double marginal_by_quadrature(const Model& m, std::span<const int> x) {
  const int n = 40000;
  const double lo = -12.0, hi = 12.0, h = (hi - lo) / n;
  double total = 0.0;
  for (int i = 0; i <= n; ++i) {
    const double z = lo + i * h;
    const double w = (i == 0 || i == n) ? 1.0 : (i % 2 ? 4.0 : 2.0);
    total += w * std::exp(log_cond_likelihood(m, x, Vector::Constant(1, z)) - 0.5 * z * z) /
             std::sqrt(2 * std::numbers::pi);
  }
  return std::log(total * h / 3.0);
}

struct Instance {
  ModelSpec spec;
  ParameterSet params;
  InferenceNet net;
  ResponseMatrix data;
};

Instance random_instance(int J, int P, int n, Rng& rng, std::vector<int> hidden = {4}) {
  Instance in;
  in.spec = random_spec(J, P, rng);
  in.params = random_params(in.spec, rng);
  in.net = InferenceNet(in.spec.categories, P, std::move(hidden));
  in.net.initialize(rng());
  in.net.parameters() += normal_vector(in.net.parameter_count(), rng, 0.2);
  in.data = random_responses(in.spec.categories, n, rng);
  return in;
}

}  // namespace

TEST(Pack, RoundTripAndLayout) {
  Rng rng(1);
  const ModelSpec s = random_spec(4, 2, rng);
  const ParameterSet p = random_params(s, rng);
  const Vector flat = pack(p);
  EXPECT_EQ(flat.size(), omega_size(s));
  EXPECT_EQ(flat.head(p.intercepts.size()), p.intercepts);
  const ParameterSet back = unpack(s, flat);
  EXPECT_EQ(back.intercepts, p.intercepts);
  EXPECT_EQ(back.loadings, p.loadings);
  EXPECT_EQ(back.angles, p.angles);
  EXPECT_THROW(unpack(s, flat.head(flat.size() - 1)), std::invalid_argument);
}

TEST(LogWeight, PriorEqualsPosteriorLeavesLikelihood) {
  const ModelSpec s = simple_structure({3, 3, 2}, {0, 1, 1}, 2);
  ParameterSet p;
  p.intercepts = (Vector(5) << -0.3, 0.2, 0.1, -0.4, 0.6).finished();
  p.loadings = Vector::Zero(3);
  p.angles = Vector::Constant(1, kHalfPi);
  const Model m = materialize(s, p);
  const std::vector<int> x{2, 0, 1};
  const double expected = log_cond_likelihood(m, x, Vector::Zero(2));
  Rng rng(2);
  for (int t = 0; t < 10; ++t) {
    const Vector z = normal_vector(2, rng, 2.0);
    EXPECT_NEAR(log_weight(m, x, z, {Vector::Zero(2), Vector::Zero(2)}), expected, 1e-13);
  }
}

TEST(LogWeight, MatchesDenseDensities) {
  Rng rng(3);
  for (int t = 0; t < 20; ++t) {
    const ModelSpec s = random_spec(4, 3, rng);
    const Model m = materialize(s, random_params(s, rng));
    const ResponseMatrix xm = random_responses(s.categories, 1, rng);
    const std::vector<int> x(xm.data(), xm.data() + 4);
    const Vector z = normal_vector(3, rng);
    const PosteriorParams q{normal_vector(3, rng), normal_vector(3, rng, 0.3)};
    const double expected =
        log_cond_likelihood(m, x, z) + log_mvn(z, m.correlation.sigma) - log_q(z, q);
    EXPECT_NEAR(log_weight(m, x, z, q), expected, 1e-10);
  }
}

TEST(LogWeight, SingularCorrelationIsNumericalError) {
  const ModelSpec s = simple_structure({2, 2}, {0, 1}, 2);
  Model m = materialize(s, ParameterSet{Vector::Zero(2), Vector::Ones(2), Vector::Constant(1, 1.0)});
  m.correlation.lower << 1, 0, 1, 0;
  m.correlation.sigma = m.correlation.lower * m.correlation.lower.transpose();
  EXPECT_THROW(log_weight(m, std::vector<int>{0, 1}, Vector::Zero(2),
                          {Vector::Zero(2), Vector::Zero(2)}),
               NumericalError);
}

TEST(IwElbo, ExactWhenLikelihoodIgnoresLatents) {
  const ModelSpec s = simple_structure({3, 2, 4}, {0, 0, 0}, 1);
  ParameterSet p;
  p.intercepts = (Vector(6) << -0.5, 0.3, 0.2, -1.0, 0.0, 0.5).finished();
  p.loadings = Vector::Zero(3);
  const Model m = materialize(s, p);
  Rng rng(5);
  const ResponseMatrix x = random_responses(s.categories, 25, rng);
  double expected = 0.0;
  for (int i = 0; i < 25; ++i) {
    for (int j = 0; j < 3; ++j) expected += std::log(category_probs(m.item(j), Vector::Zero(1))(x(i, j)));
  }
  const InferenceNet net = zero_net(s);
  const auto rows = all_rows(x);
  for (int R : {1, 3, 20}) {
    EXPECT_NEAR(iw_elbo_estimate(s, p, net, x, rows, R, 1, 9), expected, 1e-10);
    EXPECT_NEAR(iw_elbo_estimate(s, p, net, x, rows, R, 2, 10), expected, 1e-10);
  }
}

TEST(IwElbo, QuadratureBracketsTheEstimate) {
  const ModelSpec s = simple_structure({3, 3, 3, 2}, {0, 0, 0, 0}, 1);
  ParameterSet p;
  p.intercepts = (Vector(7) << -0.8, 0.1, -0.2, 0.4, -1.0, -0.3, 0.2).finished();
  p.loadings = (Vector(4) << 1.4, -0.9, 2.0, 0.7).finished();
  const Model m = materialize(s, p);
  ResponseMatrix x(1, 4);
  x << 2, 0, 1, 1;
  const double log_px = marginal_by_quadrature(m, std::vector<int>{2, 0, 1, 1});

  InferenceNet net = zero_net(s);
  const std::vector<int> rows{0};
  double sum1 = 0.0, sq1 = 0.0;
  const int draws = 400;
  for (int t = 0; t < draws; ++t) {
    const double v = iw_elbo_estimate(s, p, net, x, rows, 1, 1, 100 + t);
    sum1 += v;
    sq1 += v * v;
  }
  const double mean1 = sum1 / draws;
  const double se1 = std::sqrt((sq1 / draws - mean1 * mean1) / draws);
  EXPECT_LT(mean1, log_px + 2 * se1);
  // Many importance samples concentrate the estimate at log p(x).
  double big = 0.0;
  for (int t = 0; t < 10; ++t) big += iw_elbo_estimate(s, p, net, x, rows, 5000, 1, 900 + t);
  EXPECT_NEAR(big / 10, log_px, 0.01);
}

TEST(IwElbo, MeanNondecreasingInR) {
  Rng rng(7);
  Instance in = random_instance(4, 2, 4, rng);
  const auto rows = all_rows(in.data);
  const int draws = 200;
  std::vector<double> mean(3), se(3);
  const int Rs[3] = {1, 5, 25};
  for (int a = 0; a < 3; ++a) {
    double s1 = 0.0, s2 = 0.0;
    for (int t = 0; t < draws; ++t) {
      const double v = iw_elbo_estimate(in.spec, in.params, in.net, in.data, rows, Rs[a], 1, t);
      s1 += v;
      s2 += v * v;
    }
    mean[a] = s1 / draws;
    se[a] = std::sqrt((s2 / draws - mean[a] * mean[a]) / draws);
  }
  EXPECT_LE(mean[0], mean[1] + 2 * std::hypot(se[0], se[1]));
  EXPECT_LE(mean[1], mean[2] + 2 * std::hypot(se[1], se[2]));
}

TEST(IwElbo, PerObservationSumsToBatchObjective) {
  Rng rng(8);
  Instance in = random_instance(3, 1, 6, rng);
  const Vector per = iw_elbo_per_observation(in.spec, in.params, in.net, in.data, 3, 4);
  ASSERT_EQ(per.size(), 6);
  const auto rows = all_rows(in.data);
  EXPECT_NEAR(per.sum(), iw_elbo_estimate(in.spec, in.params, in.net, in.data, rows, 3, 1, 4),
              1e-10);
}

TEST(IwElbo, RejectsBadArguments) {
  Rng rng(9);
  Instance in = random_instance(3, 1, 4, rng);
  const auto rows = all_rows(in.data);
  const Matrix noise = Matrix::Zero(1, 4 * 2);
  EXPECT_THROW(evaluate_batch(in.spec, in.params, in.net, in.data, rows, 0, 1, noise, false,
                              PsiEstimator::none),
               std::invalid_argument);
  EXPECT_THROW(evaluate_batch(in.spec, in.params, in.net, in.data, rows, 3, 1, noise, false,
                              PsiEstimator::none),
               std::invalid_argument);
  const std::vector<int> bad{0, 7};
  EXPECT_THROW(evaluate_batch(in.spec, in.params, in.net, in.data, bad, 1, 1, Matrix::Zero(1, 2),
                              false, PsiEstimator::none),
               std::out_of_range);
}

// Common random numbers: the noise is fixed, so the Monte Carlo objective is a
// deterministic smooth function of omega and psi.
TEST(Gradients, OmegaMatchesFiniteDifferences) {
  Rng rng(11);
  for (int t = 0; t < 20; ++t) {
    const int P = 1 + t % 3, J = 3 + t % 4, R = 1 + t % 5, S = 1 + t % 2;
    Instance in = random_instance(J, P, 3, rng);
    const auto rows = all_rows(in.data);
    const Matrix noise = draw_noise(3, R, S, P, rng);
    const BatchGradient g = evaluate_batch(in.spec, in.params, in.net, in.data, rows, R, S, noise,
                                           true, PsiEstimator::none);
    auto f = [&](const Vector& flat) {
      return evaluate_batch(in.spec, unpack(in.spec, flat), in.net, in.data, rows, R, S, noise,
                            false, PsiEstimator::none)
          .objective;
    };
    EXPECT_LT(relative_error(g.omega, numeric_gradient(f, pack(in.params))), 1e-4)
        << "instance " << t;
  }
}

TEST(Gradients, PathwisePsiMatchesFiniteDifferences) {
  Rng rng(13);
  for (int t = 0; t < 20; ++t) {
    const int P = 1 + t % 3, J = 3 + t % 4, R = 1 + t % 5;
    Instance in = random_instance(J, P, 2, rng, {3});
    const auto rows = all_rows(in.data);
    const Matrix noise = draw_noise(2, R, 1, P, rng);
    const BatchGradient g = evaluate_batch(in.spec, in.params, in.net, in.data, rows, R, 1, noise,
                                           false, PsiEstimator::pathwise);
    auto f = [&](const Vector& psi) {
      InferenceNet net = in.net;
      net.parameters() = psi;
      return evaluate_batch(in.spec, in.params, net, in.data, rows, R, 1, noise, false,
                            PsiEstimator::none)
          .objective;
    };
    EXPECT_LT(relative_error(g.psi, numeric_gradient(f, in.net.parameters())), 1e-4)
        << "instance " << t;
  }
}

// With a linear net the output bias gradient is the per-observation
// (d mean, d log_sd). At R = 1 the doubly reparameterized estimator differs
// from the pathwise one exactly by the removed score terms eps/sigma and
// eps^2 - 1.
TEST(Gradients, DregAtSingleSampleDropsScoreTerm) {
  Rng rng(17);
  for (int t = 0; t < 5; ++t) {
    Instance in = random_instance(4, 2, 1, rng, {});
    const std::vector<int> rows{0};
    const Matrix noise = draw_noise(1, 1, 1, 2, rng);
    const Vector dreg = evaluate_batch(in.spec, in.params, in.net, in.data, rows, 1, 1, noise,
                                       false, PsiEstimator::dreg)
                            .psi.tail(4);
    const Vector path = evaluate_batch(in.spec, in.params, in.net, in.data, rows, 1, 1, noise,
                                       false, PsiEstimator::pathwise)
                            .psi.tail(4);
    const PosteriorParams q = in.net.encode(std::vector<int>(in.data.data(), in.data.data() + 4));
    for (int p = 0; p < 2; ++p) {
      const double eps = noise(p, 0), sigma = std::exp(q.log_sd(p));
      EXPECT_NEAR(dreg(p) - path(p), eps / sigma, 1e-10);
      EXPECT_NEAR(dreg(2 + p) - path(2 + p), eps * eps - 1.0, 1e-10);
    }
  }
}

// Both estimators are unbiased for the gradient of the expected objective.
TEST(Gradients, DregAgreesWithPathwiseInExpectation) {
  Rng rng(19);
  Instance in = random_instance(4, 2, 2, rng, {3});
  const auto rows = all_rows(in.data);
  const int R = 4, draws = 3000;
  const Eigen::Index n = in.net.parameter_count();
  Vector sum_d = Vector::Zero(n), sum_p = Vector::Zero(n), sq = Vector::Zero(n);
  for (int t = 0; t < draws; ++t) {
    const Matrix noise = draw_noise(2, R, 1, 2, rng);
    const Vector d = evaluate_batch(in.spec, in.params, in.net, in.data, rows, R, 1, noise, false,
                                    PsiEstimator::dreg)
                         .psi;
    const Vector p = evaluate_batch(in.spec, in.params, in.net, in.data, rows, R, 1, noise, false,
                                    PsiEstimator::pathwise)
                         .psi;
    sum_d += d;
    sum_p += p;
    sq += (d - p).cwiseAbs2();
  }
  const Vector diff = (sum_d - sum_p) / draws;
  const Vector se = ((sq / draws - diff.cwiseAbs2()) / draws).cwiseSqrt();
  int outside = 0;
  for (Eigen::Index i = 0; i < n; ++i) outside += std::abs(diff(i)) > 4 * se(i) + 1e-12;
  EXPECT_LE(outside, 1);
}

TEST(Gradients, SeededWrappersMatchBatchEvaluation) {
  Rng rng(23);
  Instance in = random_instance(3, 2, 3, rng);
  const auto rows = all_rows(in.data);
  Rng noise_rng(77);
  const Matrix noise = draw_noise(3, 5, 1, 2, noise_rng);
  const BatchGradient g = evaluate_batch(in.spec, in.params, in.net, in.data, rows, 5, 1, noise,
                                         true, PsiEstimator::dreg);
  EXPECT_EQ(grad_omega(in.spec, in.params, in.net, in.data, rows, 5, 77), g.omega);
  EXPECT_EQ(grad_psi_dreg(in.spec, in.params, in.net, in.data, rows, 5, 77), g.psi);
}

TEST(AmsGradTest, ZeroGradientKeepsParameters) {
  AmsGrad opt(3, 0.1);
  Vector x(3);
  x << 1, -2, 3;
  const Vector before = x;
  opt.step(x, Vector::Zero(3));
  EXPECT_EQ(x, before);
}

TEST(AmsGradTest, FirstStepIsSignScaled) {
  AmsGrad opt(3, 0.01);
  Vector x = Vector::Zero(3), g(3);
  g << 0.5, -4.0, 1e-3;
  opt.step(x, g);
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(x(i), -0.01 * g(i) / (std::abs(g(i)) + 1e-8), 1e-15);
  EXPECT_EQ(opt.iterations(), 1);
}

TEST(AmsGradTest, SecondMomentMaxIsMonotone) {
  Rng rng(29);
  AmsGrad opt(4, 0.01);
  Vector x = Vector::Zero(4);
  Vector prev = Vector::Zero(4);
  for (int t = 0; t < 200; ++t) {
    opt.step(x, normal_vector(4, rng, t % 20 < 10 ? 5.0 : 0.1));
    EXPECT_TRUE((opt.max_second_moment().array() >= prev.array()).all());
    prev = opt.max_second_moment();
  }
  EXPECT_THROW(opt.step(x, Vector::Zero(3)), std::invalid_argument);
}

TEST(InitParams, IdentityCorrelationAndBounds) {
  using K = LoadingEntry::Kind;
  // Factor 0 carries four free entries, factor 1 one free and one fixed entry.
  std::vector<std::vector<LoadingEntry>> pattern{
      {{K::free, 0, {}}, {K::fixed, 0, {}}}, {{K::free, 0, {}}, {K::fixed, 0, {}}},
      {{K::free, 0, {}}, {K::fixed, 0.4, {}}}, {{K::free, 0, {}}, {K::free, 0, {}}}};
  CorrelationStructure corr{{{1, 0}}, Matrix::Constant(2, 2, kHalfPi)};
  const ModelSpec s = compile_loading_pattern({3, 3, 3, 4}, 2, pattern, corr);
  ASSERT_EQ(s.free_loadings, 5);
  const double bound0 = std::sqrt(6.0 / (4 + 2)), bound1 = std::sqrt(6.0 / (1 + 2));
  double max1 = 0.0;
  for (std::uint64_t seed = 0; seed < 2000; ++seed) {
    const ParameterSet p = init_params(s, seed);
    const Model m = materialize(s, p);
    ASSERT_EQ((m.correlation.sigma - Matrix::Identity(2, 2)).cwiseAbs().maxCoeff(), 0.0);
    for (int j = 0; j < 4; ++j) EXPECT_LE(std::abs(m.loadings(j, 0)), bound0);
    EXPECT_LE(std::abs(m.loadings(3, 1)), bound1);
    max1 = std::max(max1, std::abs(m.loadings(3, 1)));
    for (int j = 0; j < 4; ++j) {
      EXPECT_GT(m.intercepts[j](0), -1.5);
      EXPECT_LT(m.intercepts[j](0), -0.5);
      for (Eigen::Index k = 1; k < m.intercepts[j].size(); ++k)
        EXPECT_NEAR(m.intercepts[j](k) - m.intercepts[j](k - 1), 1.0, 1e-12);
    }
  }
  // The factor with fewer free entries gets the wider range.
  EXPECT_GT(max1, bound0);
}

TEST(FitConfigTest, ValidationErrors) {
  FitConfig c;
  EXPECT_NO_THROW(c.validate());
  for (auto mutate : std::vector<std::function<void(FitConfig&)>>{
           [](FitConfig& f) { f.iw_samples = 0; }, [](FitConfig& f) { f.mc_samples = 0; },
           [](FitConfig& f) { f.learning_rate = 0; }, [](FitConfig& f) { f.batch_size = 0; },
           [](FitConfig& f) { f.max_steps = 0; }, [](FitConfig& f) { f.window = 0; },
           [](FitConfig& f) { f.patience = 0; }, [](FitConfig& f) { f.tolerance = -1; }}) {
    FitConfig bad;
    mutate(bad);
    EXPECT_THROW(bad.validate(), std::invalid_argument);
  }
}

namespace {

struct Simulated {
  ModelSpec spec;
  Model truth;
  ResponseMatrix data;
};

Simulated one_factor_data(int n, std::uint64_t seed) {
  Simulated s;
  s.spec = simple_structure({3, 3, 3, 3, 3, 3}, {0, 0, 0, 0, 0, 0}, 1);
  ParameterSet p;
  p.intercepts.resize(12);
  for (int j = 0; j < 6; ++j) {
    p.intercepts.segment(2 * j, 2) =
        raw_from_intercepts((Vector(2) << -1.0 + 0.2 * j, 0.5 + 0.2 * j).finished());
  }
  p.loadings = (Vector(6) << 1.0, 1.3, 1.6, 1.9, 2.2, 1.2).finished();
  s.truth = materialize(s.spec, p);
  s.data = sample_responses(s.truth, n, seed);
  return s;
}

}  // namespace

TEST(Fit, RecoversOneFactorLoadings) {
  const Simulated sim = one_factor_data(4000, 31);
  FitConfig c;
  c.seed = 5;
  const FitResult r = fit(sim.data, sim.spec, c);
  EXPECT_TRUE(r.converged);
  Matrix L = r.model(sim.spec).loadings;
  if (L.col(0).sum() < 0) L = -L;
  const double rmse = std::sqrt((L - sim.truth.loadings).squaredNorm() / 6.0);
  EXPECT_LT(rmse, 0.2);
  EXPECT_EQ(r.free_parameters, 18);
  EXPECT_EQ(static_cast<int>(r.trace.size()), r.steps);
}

TEST(Fit, DeterministicGivenSeed) {
  const Simulated sim = one_factor_data(300, 37);
  FitConfig c;
  c.seed = 3;
  c.max_steps = 300;
  const FitResult a = fit(sim.data, sim.spec, c), b = fit(sim.data, sim.spec, c);
  EXPECT_EQ(pack(a.params), pack(b.params));
  EXPECT_EQ(a.net.parameters(), b.net.parameters());
  EXPECT_EQ(a.trace, b.trace);
  c.seed = 4;
  EXPECT_NE(pack(fit(sim.data, sim.spec, c).params), pack(a.params));
}

TEST(Fit, StepCapReturnsUnconvergedResult) {
  const Simulated sim = one_factor_data(200, 41);
  FitConfig c;
  c.max_steps = 25;
  const FitResult r = fit(sim.data, sim.spec, c);
  EXPECT_FALSE(r.converged);
  EXPECT_EQ(r.steps, 25);
  EXPECT_TRUE(pack(r.params).allFinite());
}

TEST(Fit, PartialLastBatchAndCustomNet) {
  const Simulated sim = one_factor_data(50, 43);
  FitConfig c;
  c.batch_size = 32;
  c.max_steps = 10;
  c.hidden = std::vector<int>{7, 5};
  const FitResult r = fit(sim.data, sim.spec, c);
  EXPECT_EQ(r.net.hidden(), (std::vector<int>{7, 5}));
  EXPECT_EQ(r.steps, 10);
}

TEST(Fit, RejectsUnfittableInputs) {
  const Simulated sim = one_factor_data(20, 47);
  FitConfig c;
  EXPECT_THROW(fit(sim.data, zero_factor_spec(sim.spec.categories), c), std::invalid_argument);
  EXPECT_THROW(fit(ResponseMatrix(0, 6), sim.spec, c), std::invalid_argument);
  ResponseMatrix bad = sim.data;
  bad(0, 0) = 3;
  EXPECT_THROW(fit(bad, sim.spec, c), std::out_of_range);
}

TEST(Fit, DivergenceIsNumericalError) {
  const Simulated sim = one_factor_data(100, 53);
  FitConfig c;
  c.learning_rate = 1e300;
  c.max_steps = 50;
  EXPECT_THROW(fit(sim.data, sim.spec, c), NumericalError);
}
