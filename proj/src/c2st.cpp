#include "cifa/c2st.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <boost/math/distributions/normal.hpp>

namespace cifa {

namespace {

const boost::math::normal_distribution<double> kStdNormal;

double upper_tail(double z) { return boost::math::cdf(boost::math::complement(kStdNormal, z)); }

LabeledSet shuffle_split(Matrix features, std::size_t n, std::uint64_t seed) {
  LabeledSet set;
  set.features = std::move(features);
  set.labels.assign(2 * n, 0);
  std::fill(set.labels.begin(), set.labels.begin() + static_cast<std::ptrdiff_t>(n), 1);
  std::vector<int> perm(2 * n);
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng(seed);
  std::shuffle(perm.begin(), perm.end(), rng);
  set.train.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n));
  set.test.assign(perm.begin() + static_cast<std::ptrdiff_t>(n), perm.end());
  return set;
}

Matrix test_rows(const LabeledSet& set) {
  Matrix out(static_cast<Eigen::Index>(set.test.size()), set.features.cols());
  for (std::size_t i = 0; i < set.test.size(); ++i)
    out.row(static_cast<Eigen::Index>(i)) = set.features.row(set.test[i]);
  return out;
}

std::vector<int> test_labels(const LabeledSet& set) {
  std::vector<int> out;
  out.reserve(set.test.size());
  for (int r : set.test) out.push_back(set.labels[r]);
  return out;
}

}  // namespace

LabeledSet build_split(const ResponseMatrix& real, const ResponseMatrix& synthetic,
                       const std::vector<int>& categories, std::uint64_t seed) {
  if (real.cols() != synthetic.cols()) {
    throw std::invalid_argument("real and synthetic data have different item counts");
  }
  if (real.rows() != synthetic.rows()) {
    throw std::invalid_argument("real and synthetic samples must have equal size");
  }
  validate_responses(real, categories);
  validate_responses(synthetic, categories);
  const Eigen::Index n = real.rows();
  Matrix features(2 * n, real.cols());
  features.topRows(n) = real.cast<double>();
  features.bottomRows(n) = synthetic.cast<double>();
  LabeledSet set = shuffle_split(std::move(features), static_cast<std::size_t>(n), seed);
  set.categories = categories;
  return set;
}

LabeledSet build_split(const Matrix& real, const Matrix& synthetic, std::uint64_t seed) {
  if (real.cols() != synthetic.cols()) {
    throw std::invalid_argument("real and synthetic data have different widths");
  }
  if (real.rows() != synthetic.rows()) {
    throw std::invalid_argument("real and synthetic samples must have equal size");
  }
  const Eigen::Index n = real.rows();
  Matrix features(2 * n, real.cols());
  features << real, synthetic;
  return shuffle_split(std::move(features), static_cast<std::size_t>(n), seed);
}

double accuracy(const Vector& probabilities, const std::vector<int>& labels) {
  if (probabilities.size() == 0) throw std::invalid_argument("accuracy of an empty test set");
  if (static_cast<std::size_t>(probabilities.size()) != labels.size()) {
    throw std::invalid_argument("probability and label counts differ");
  }
  int correct = 0;
  for (Eigen::Index i = 0; i < probabilities.size(); ++i) {
    const int predicted = probabilities(i) > 0.5 ? 1 : 0;
    correct += predicted == labels[i];
  }
  return static_cast<double>(correct) / static_cast<double>(labels.size());
}

double exact_pvalue(double acc, int n_test) {
  if (n_test < 1) throw std::invalid_argument("N_test must be >= 1");
  return upper_tail((acc - 0.5) / std::sqrt(1.0 / (4.0 * n_test)));
}

double approx_pvalue(double acc, int n_test, double delta) {
  if (n_test < 1) throw std::invalid_argument("N_test must be >= 1");
  if (!(delta > 0.0 && delta < 0.5)) throw std::domain_error("delta must lie in (0, 1/2)");
  return upper_tail((acc - 0.5 - delta) / std::sqrt((0.25 - delta * delta) / n_test));
}

double power(double alpha, int n_test, double delta, double epsilon) {
  if (!(alpha > 0.0 && alpha < 1.0)) throw std::domain_error("alpha must lie in (0, 1)");
  if (n_test < 1) throw std::domain_error("N_test must be >= 1");
  if (!(delta >= 0.0 && delta < 0.5)) throw std::domain_error("delta must lie in [0, 1/2)");
  if (!(epsilon >= 0.0 && epsilon < 0.5 - delta)) {
    throw std::domain_error("epsilon must lie in [0, 1/2 - delta)");
  }
  // Phi(-z_{1-alpha}) = alpha; skip the quantile round trip.
  if (epsilon == 0.0) return alpha;
  const double null_var = 0.25 - delta * delta;
  const double alt_var = null_var - 2.0 * delta * epsilon - epsilon * epsilon;
  const double crit = boost::math::quantile(kStdNormal, 1.0 - alpha);
  const double z =
      (epsilon * std::sqrt(static_cast<double>(n_test)) - std::sqrt(null_var) * crit) /
      std::sqrt(alt_var);
  return boost::math::cdf(kStdNormal, z);
}

C2stOutcome evaluate_outcome(const Vector& probabilities, const std::vector<int>& labels,
                             double delta) {
  C2stOutcome out;
  out.accuracy = accuracy(probabilities, labels);
  out.n_test = static_cast<int>(labels.size());
  out.delta = delta;
  out.p_value = delta == 0.0 ? exact_pvalue(out.accuracy, out.n_test)
                             : approx_pvalue(out.accuracy, out.n_test, delta);
  out.probabilities = probabilities;
  return out;
}

int count_parameters(const ModelSpec& spec) {
  return spec.intercept_count() + spec.free_loadings +
         static_cast<int>(spec.correlation.free.size());
}

double rfi(double acc_prop, double acc_base, int m_prop, int m_base) {
  const double base = acc_base - 0.5;
  if (base == 0.0) throw std::domain_error("RFI undefined: baseline accuracy is exactly 1/2");
  if (m_base <= 0) throw std::domain_error("baseline parameter count must be positive");
  return 1.0 - (static_cast<double>(m_prop) / m_base) * ((acc_prop - 0.5) / base);
}

RfiOutcome rfi_outcome(double acc_prop, double acc_base, int m_prop, int m_base) {
  return {acc_prop, acc_base, m_prop, m_base, rfi(acc_prop, acc_base, m_prop, m_base)};
}

Vector permutation_importance(const Classifier& classifier, const LabeledSet& set, int T,
                              std::uint64_t seed) {
  if (T < 1) throw std::invalid_argument("permutation importance needs T >= 1");
  if (set.test.empty()) throw std::invalid_argument("empty test set");
  const Matrix U = test_rows(set);
  const std::vector<int> labels = test_labels(set);
  const double acc = accuracy(classifier.predict(U), labels);
  Rng rng(seed);
  Vector imp(U.cols());
  Matrix corrupted = U;
  std::vector<Eigen::Index> perm(static_cast<std::size_t>(U.rows()));
  for (Eigen::Index j = 0; j < U.cols(); ++j) {
    double total = 0.0;
    for (int t = 0; t < T; ++t) {
      std::iota(perm.begin(), perm.end(), Eigen::Index{0});
      std::shuffle(perm.begin(), perm.end(), rng);
      for (Eigen::Index i = 0; i < U.rows(); ++i) corrupted(i, j) = U(perm[i], j);
      total += accuracy(classifier.predict(corrupted), labels);
    }
    corrupted.col(j) = U.col(j);
    imp(j) = acc - total / T;
  }
  return imp;
}

C2stRun run_c2st(LabeledSet set, const C2stOptions& options) {
  C2stRun run;
  run.classifier = options.classifier == ClassifierKind::knn ? fit_knn(set, options.knn)
                                                              : fit_neural(set, options.neural);
  const Vector probs = run.classifier->predict(test_rows(set));
  run.outcome = evaluate_outcome(probs, test_labels(set), options.delta);
  run.set = std::move(set);
  return run;
}

C2stRun run_c2st(const SyntheticSource& source, const ResponseMatrix& data,
                 const std::vector<int>& categories, const C2stOptions& options,
                 std::uint64_t seed) {
  const int n = static_cast<int>(data.rows());
  if (n < 1) throw std::invalid_argument("C2ST needs at least one observed row");
  const std::uint64_t sample_seed = mix_seed(seed, 0);
  const ResponseMatrix synthetic = std::visit(
      [&](const auto& s) -> ResponseMatrix {
        using T = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<T, Model>) {
          return sample_responses(s, n, sample_seed);
        } else {
          return sample_baseline(s.proportions, n, sample_seed);
        }
      },
      source);
  C2stOptions opts = options;
  opts.knn.seed = mix_seed(seed, 2);
  opts.neural.seed = mix_seed(seed, 3);
  return run_c2st(build_split(data, synthetic, categories, mix_seed(seed, 1)), opts);
}

}  // namespace cifa
