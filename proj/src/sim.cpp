#include "cifa/sim.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <exception>
#include <limits>
#include <mutex>
#include <numbers>
#include <numeric>
#include <thread>

namespace cifa {

std::uint64_t replication_seed(std::uint64_t base, std::uint64_t cell, std::uint64_t rep) {
  return mix_seed(mix_seed(base, cell), rep);
}

void parallel_for(int count, int jobs, const std::function<void(int)>& fn) {
  if (jobs <= 1 || count <= 1) {
    for (int i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto worker = [&] {
    for (int i = next++; i < count; i = next++) {
      try {
        fn(i);
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  for (int t = 0; t < std::min(jobs, count); ++t) pool.emplace_back(worker);
  for (auto& th : pool) th.join();
  if (failure) std::rethrow_exception(failure);
}

double median(std::vector<double> values) {
  if (values.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(values.begin(), values.end());
  const std::size_t m = values.size() / 2;
  return values.size() % 2 ? values[m] : 0.5 * (values[m - 1] + values[m]);
}

Model align_signs(const Model& fitted, const Matrix& reference_loadings) {
  if (reference_loadings.rows() != fitted.loadings.rows() ||
      reference_loadings.cols() != fitted.loadings.cols()) {
    throw std::invalid_argument("reference loadings have a different shape");
  }
  Model out = fitted;
  const Eigen::Index P = fitted.loadings.cols();
  Vector d = Vector::Ones(P);
  for (Eigen::Index p = 0; p < P; ++p) {
    if (fitted.loadings.col(p).dot(reference_loadings.col(p)) < 0.0) d(p) = -1.0;
  }
  out.loadings = fitted.loadings * d.asDiagonal();
  out.correlation.sigma = d.asDiagonal() * fitted.correlation.sigma * d.asDiagonal();
  out.correlation.lower = d.asDiagonal() * fitted.correlation.lower;
  return out;
}

// -- tracked parameters -------------------------------------------------------------

std::vector<TrackedParameter> tracked_parameters(const Generator& generator) {
  const ModelSpec& spec = generator.spec;
  const Vector truth = tracked_values(spec, generator.model());
  std::vector<std::string> names;
  for (int j = 0; j < spec.items(); ++j)
    for (int k = 1; k < spec.categories[j]; ++k)
      names.push_back("intercept[" + std::to_string(j) + "," + std::to_string(k) + "]");
  for (int q = 0; q < spec.free_loadings; ++q) {
    std::string name = "loading[free " + std::to_string(q) + "]";
    for (int j = 0; j < spec.items() && name.starts_with("loading[free"); ++j)
      for (int p = 0; p < spec.factors; ++p)
        if (spec.loading_map[j](p, q) != 0.0) {
          name = "loading[" + std::to_string(j) + "," + std::to_string(p) + "]";
          break;
        }
    names.push_back(name);
  }
  for (auto [r, c] : spec.correlation.free)
    names.push_back("correlation[" + std::to_string(r) + "," + std::to_string(c) + "]");
  std::vector<TrackedParameter> out;
  for (std::size_t i = 0; i < names.size(); ++i)
    out.push_back({names[i], truth(static_cast<Eigen::Index>(i))});
  return out;
}

Vector tracked_values(const ModelSpec& spec, const Model& model) {
  const Vector free = free_loadings_from(spec, model.loadings);
  Vector out(spec.intercept_count() + spec.free_loadings +
             static_cast<Eigen::Index>(spec.correlation.free.size()));
  Eigen::Index at = 0;
  for (const auto& a : model.intercepts) {
    out.segment(at, a.size()) = a;
    at += a.size();
  }
  out.segment(at, free.size()) = free;
  at += free.size();
  for (auto [r, c] : spec.correlation.free) out(at++) = model.correlation.sigma(r, c);
  return out;
}

namespace {

struct ScoredFit {
  Model model;
  double elbo = 0.0;
  double se = 0.0;
  int steps = 0;
  bool converged = false;
  double seconds = 0.0;
};

ScoredFit fit_and_score(const ResponseMatrix& data, const ModelSpec& spec, FitConfig cfg,
                        std::uint64_t fit_seed, std::uint64_t eval_seed) {
  cfg.seed = fit_seed;
  FitResult r = fit(data, spec, cfg);
  const Vector v =
      iw_elbo_per_observation(spec, r.params, r.net, data, cfg.iw_samples, eval_seed);
  ScoredFit out;
  out.model = r.model(spec);
  const double n = static_cast<double>(v.size());
  out.elbo = v.mean();
  out.se = n > 1 ? std::sqrt((v.array() - out.elbo).square().sum() / (n - 1) / n) : 0.0;
  out.steps = r.steps;
  out.converged = r.converged;
  out.seconds = r.seconds;
  return out;
}

// Marks fits whose IW-ELBO sits more than `threshold` standard errors below
// the median of their group.
template <typename Get>
std::vector<int> poor_maxima(const std::vector<int>& members, double threshold, Get get) {
  std::vector<double> values;
  for (int m : members) values.push_back(get(m).first);
  const double med = median(values);
  std::vector<int> out;
  for (int m : members) {
    auto [elbo, se] = get(m);
    if (elbo < med - threshold * se) out.push_back(m);
  }
  return out;
}

}  // namespace

// -- recovery ---------------------------------------------------------------------

void RecoveryConfig::validate() const {
  if (replications < 1) throw std::invalid_argument("replications must be >= 1");
  if (cells.empty()) throw std::invalid_argument("recovery grid is empty");
  for (const auto& c : cells) {
    if (c.n < 1 || c.iw_samples < 1) throw std::invalid_argument("invalid recovery cell");
  }
  generator.spec.validate();
  fit.validate();
}

RecoveryReport run_recovery(const RecoveryConfig& config) {
  config.validate();
  const ModelSpec& spec = config.generator.spec;
  const Model truth = config.generator.model();
  RecoveryReport report;
  report.parameters = tracked_parameters(config.generator);

  const int reps = config.replications;
  const int total = static_cast<int>(config.cells.size()) * reps;
  report.records.resize(total);

  auto run_one = [&](int job, bool refit) {
    FitRecord& rec = report.records[job];
    const int c = job / reps, a = job % reps;
    const RecoveryCell& cell = config.cells[c];
    const std::uint64_t seed = replication_seed(config.seed, c, a);
    const ResponseMatrix data = sample_responses(truth, cell.n, mix_seed(seed, 0));
    FitConfig cfg = config.fit;
    cfg.iw_samples = cell.iw_samples;
    try {
      ScoredFit s = fit_and_score(data, spec, cfg, mix_seed(seed, refit ? 3 : 1),
                                  mix_seed(seed, 2));
      if (refit && s.elbo <= rec.final_elbo) {
        rec.refitted = true;
        return;
      }
      rec.estimate = tracked_values(spec, align_signs(s.model, truth.loadings));
      rec.final_elbo = s.elbo;
      rec.elbo_se = s.se;
      rec.steps = s.steps;
      rec.converged = s.converged;
      rec.seconds += s.seconds;
      rec.refitted = refit;
      rec.error.clear();
    } catch (const std::exception& e) {
      if (!refit) rec.error = e.what();
    }
  };

  parallel_for(total, config.jobs, [&](int job) {
    FitRecord& rec = report.records[job];
    rec.cell = job / reps;
    rec.replication = job % reps;
    rec.seed = replication_seed(config.seed, rec.cell, rec.replication);
    run_one(job, false);
  });

  if (config.refit_poor_maxima) {
    std::vector<int> flagged;
    for (std::size_t c = 0; c < config.cells.size(); ++c) {
      std::vector<int> members;
      for (int a = 0; a < reps; ++a) {
        const int job = static_cast<int>(c) * reps + a;
        if (report.records[job].ok()) members.push_back(job);
      }
      auto f = poor_maxima(members, config.flag_threshold, [&](int m) {
        return std::pair{report.records[m].final_elbo, report.records[m].elbo_se};
      });
      flagged.insert(flagged.end(), f.begin(), f.end());
    }
    for (int job : flagged) report.records[job].flagged = true;
    parallel_for(static_cast<int>(flagged.size()), config.jobs,
                 [&](int i) { run_one(flagged[i], true); });
  }

  report.cells = aggregate_recovery(config.cells, report.parameters, report.records);
  return report;
}

std::vector<RecoveryCellReport> aggregate_recovery(const std::vector<RecoveryCell>& cells,
                                                   const std::vector<TrackedParameter>& params,
                                                   const std::vector<FitRecord>& records) {
  std::vector<RecoveryCellReport> out(cells.size());
  const Eigen::Index M = static_cast<Eigen::Index>(params.size());
  std::vector<Vector> sum(cells.size(), Vector::Zero(M)), sq(cells.size(), Vector::Zero(M));
  std::vector<double> seconds(cells.size(), 0.0);
  Vector truth(M);
  for (Eigen::Index m = 0; m < M; ++m) truth(m) = params[m].truth;
  for (const auto& rec : records) {
    auto& cell = out.at(rec.cell);
    if (rec.flagged) ++cell.flagged;
    if (!rec.ok()) {
      ++cell.failures;
      continue;
    }
    ++cell.completed;
    const Vector err = rec.estimate - truth;
    sum[rec.cell] += err;
    sq[rec.cell] += err.cwiseAbs2();
    seconds[rec.cell] += rec.seconds;
  }
  for (std::size_t c = 0; c < cells.size(); ++c) {
    auto& cell = out[c];
    cell.cell = cells[c];
    const double n = cell.completed;
    cell.mean_seconds = n > 0 ? seconds[c] / n : 0.0;
    for (Eigen::Index m = 0; m < M; ++m) {
      cell.parameters.push_back({params[m].name, params[m].truth,
                                 n > 0 ? sum[c](m) / n : std::nan(""),
                                 n > 0 ? sq[c](m) / n : std::nan("")});
    }
  }
  return out;
}

// -- uniform calibration ------------------------------------------------------------

void CalibrationConfig::validate() const {
  if (replications < 1) throw std::invalid_argument("replications must be >= 1");
  if (arms.empty() || sizes.empty() || classifiers.empty()) {
    throw std::invalid_argument("calibration grid is empty");
  }
  for (int n : sizes)
    if (n < 2) throw std::invalid_argument("calibration sizes must be >= 2");
  if (!(delta >= 0.0 && delta < 0.5)) throw std::invalid_argument("delta must lie in [0, 1/2)");
  if (!(alpha > 0.0 && alpha < 1.0)) throw std::invalid_argument("alpha must lie in (0, 1)");
}

CalibrationReport run_uniform_calibration(const CalibrationConfig& config) {
  config.validate();
  const int A = static_cast<int>(config.arms.size());
  const int Ns = static_cast<int>(config.sizes.size());
  const int C = static_cast<int>(config.classifiers.size());
  const int reps = config.replications;
  const int cells = A * Ns * C;
  CalibrationReport report;
  report.records.resize(static_cast<std::size_t>(cells) * reps);

  parallel_for(cells * reps, config.jobs, [&](int job) {
    const int cell = job / reps, rep = job % reps;
    const int arm = cell / (Ns * C), n_idx = (cell / C) % Ns, c_idx = cell % C;
    const std::uint64_t seed = replication_seed(config.seed, cell, rep);
    const auto started = std::chrono::steady_clock::now();
    const int n = config.sizes[n_idx];
    Rng rng(mix_seed(seed, 0));
    std::uniform_real_distribution<double> u(0.0, 1.0);
    Matrix real(n, 1), synthetic(n, 1);
    for (int i = 0; i < n; ++i) real(i, 0) = u(rng);
    for (int i = 0; i < n; ++i) synthetic(i, 0) = config.arms[arm].shift + u(rng);

    C2stOptions opts;
    opts.classifier = config.classifiers[c_idx];
    opts.delta = config.delta;
    opts.neural = config.neural;
    opts.neural.seed = mix_seed(seed, 2);
    opts.knn.seed = mix_seed(seed, 3);
    const C2stRun run = run_c2st(build_split(real, synthetic, mix_seed(seed, 1)), opts);

    CalibrationRecord& rec = report.records[job];
    rec.arm = arm;
    rec.n = n;
    rec.classifier = opts.classifier;
    rec.replication = rep;
    rec.accuracy = run.outcome.accuracy;
    rec.p_value = run.outcome.p_value;
    rec.reject = rec.p_value < config.alpha;
    rec.seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  });

  report.cells = aggregate_calibration(config, report.records);
  return report;
}

std::vector<CalibrationCellReport> aggregate_calibration(
    const CalibrationConfig& config, const std::vector<CalibrationRecord>& records) {
  std::vector<CalibrationCellReport> out;
  for (std::size_t a = 0; a < config.arms.size(); ++a) {
    for (int n : config.sizes) {
      for (ClassifierKind kind : config.classifiers) {
        CalibrationCellReport cell;
        cell.arm = config.arms[a];
        cell.n = n;
        cell.classifier = kind;
        double rejects = 0.0, acc = 0.0;
        for (const auto& r : records) {
          if (r.arm != static_cast<int>(a) || r.n != n || r.classifier != kind) continue;
          ++cell.replications;
          rejects += r.reject;
          acc += r.accuracy;
        }
        if (cell.replications > 0) {
          cell.rejection_rate = rejects / cell.replications;
          cell.mean_accuracy = acc / cell.replications;
        }
        cell.predicted_power = power(config.alpha, n, config.delta, cell.arm.epsilon);
        out.push_back(cell);
      }
    }
  }
  return out;
}

// -- misspecification -----------------------------------------------------------------

void MisspecConfig::validate() const {
  if (replications < 1) throw std::invalid_argument("replications must be >= 1");
  if (variants.empty() || sizes.empty() || classifiers.empty() || deltas.empty()) {
    throw std::invalid_argument("misspecification grid is empty");
  }
  if (pi_repetitions < 1) throw std::invalid_argument("pi_repetitions must be >= 1");
  generator.spec.validate();
  for (const auto& v : variants) {
    v.spec.validate();
    if (v.spec.categories != generator.spec.categories) {
      throw std::invalid_argument("variant '" + v.name + "' has different items");
    }
  }
  for (int j : flagged_items)
    if (j < 0 || j >= generator.spec.items()) throw std::invalid_argument("flagged item index");
  fit.validate();
}

bool flags_top_items(const Vector& importance, const std::vector<int>& items) {
  if (items.empty()) return false;
  std::vector<int> order(static_cast<std::size_t>(importance.size()));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return importance(a) > importance(b); });
  std::vector<int> top(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(
                                                          std::min(items.size(), order.size())));
  std::vector<int> want = items;
  std::sort(top.begin(), top.end());
  std::sort(want.begin(), want.end());
  return top == want;
}

MisspecReport run_misspecification(const MisspecConfig& config) {
  config.validate();
  const Model truth = config.generator.model();
  const auto& categories = config.generator.spec.categories;
  const int V = static_cast<int>(config.variants.size());
  const int Ns = static_cast<int>(config.sizes.size());
  const int C = static_cast<int>(config.classifiers.size());
  const int reps = config.replications;

  auto data_for = [&](int n_idx, int rep) {
    const std::uint64_t seed = replication_seed(config.seed, n_idx, rep);
    return sample_responses(truth, config.sizes[n_idx], mix_seed(seed, 0));
  };

  // Phase 1: every (size, replication, variant) fit.
  struct FitSlot {
    ScoredFit fit;
    std::string error;
    bool flagged = false;
  };
  const int fits = Ns * reps * V;
  std::vector<FitSlot> slots(fits);
  auto fit_one = [&](int job, bool refit) {
    const int v = job % V, rep = (job / V) % reps, n_idx = job / (V * reps);
    const std::uint64_t seed = replication_seed(config.seed, n_idx, rep);
    const ResponseMatrix data = data_for(n_idx, rep);
    const std::uint64_t fit_seed = mix_seed(seed, (refit ? 50 : 10) + v);
    try {
      ScoredFit s = fit_and_score(data, config.variants[v].spec, config.fit, fit_seed,
                                  mix_seed(seed, 20 + v));
      if (!refit || s.elbo > slots[job].fit.elbo) slots[job].fit = std::move(s);
      slots[job].error.clear();
    } catch (const std::exception& e) {
      if (!refit) slots[job].error = e.what();
    }
  };
  parallel_for(fits, config.jobs, [&](int job) { fit_one(job, false); });

  if (config.refit_poor_maxima) {
    std::vector<int> flagged;
    for (int n_idx = 0; n_idx < Ns; ++n_idx) {
      for (int v = 0; v < V; ++v) {
        std::vector<int> members;
        for (int rep = 0; rep < reps; ++rep) {
          const int job = (n_idx * reps + rep) * V + v;
          if (slots[job].error.empty()) members.push_back(job);
        }
        auto f = poor_maxima(members, config.flag_threshold, [&](int m) {
          return std::pair{slots[m].fit.elbo, slots[m].fit.se};
        });
        flagged.insert(flagged.end(), f.begin(), f.end());
      }
    }
    for (int job : flagged) slots[job].flagged = true;
    parallel_for(static_cast<int>(flagged.size()), config.jobs,
                 [&](int i) { fit_one(flagged[i], true); });
  }

  // Phase 2: classifier tests per (size, replication, classifier).
  MisspecReport report;
  report.records.resize(static_cast<std::size_t>(Ns) * reps * C * V);
  const ModelSpec baseline_spec = zero_factor_spec(categories);
  const int m_base = count_parameters(baseline_spec);

  parallel_for(Ns * reps * C, config.jobs, [&](int job) {
    const int c_idx = job % C, rep = (job / C) % reps, n_idx = job / (C * reps);
    const std::uint64_t seed = replication_seed(config.seed, n_idx, rep);
    const ResponseMatrix data = data_for(n_idx, rep);
    C2stOptions opts;
    opts.classifier = config.classifiers[c_idx];
    opts.neural = config.neural;
    opts.knn = config.knn;

    double acc_base = 0.5;
    std::string base_error;
    try {
      BaselineModel base{zero_factor_mle(data, categories)};
      acc_base = run_c2st(base, data, categories, opts, mix_seed(seed, 100 + c_idx))
                     .outcome.accuracy;
    } catch (const std::exception& e) {
      base_error = e.what();
    }

    for (int v = 0; v < V; ++v) {
      MisspecRecord& rec = report.records[static_cast<std::size_t>(job) * V + v];
      rec.variant = v;
      rec.n = config.sizes[n_idx];
      rec.classifier = opts.classifier;
      rec.replication = rep;
      rec.baseline_accuracy = acc_base;
      const FitSlot& slot = slots[(n_idx * reps + rep) * V + v];
      rec.flagged_fit = slot.flagged;
      if (!slot.error.empty()) {
        rec.error = "fit: " + slot.error;
        continue;
      }
      try {
        const C2stRun run = run_c2st(slot.fit.model, data, categories, opts,
                                     mix_seed(seed, 200 + 10 * v + c_idx));
        rec.accuracy = run.outcome.accuracy;
        for (double d : config.deltas) {
          rec.p_values.push_back(d == 0.0 ? exact_pvalue(rec.accuracy, run.outcome.n_test)
                                          : approx_pvalue(rec.accuracy, run.outcome.n_test, d));
        }
        if (base_error.empty() && acc_base != 0.5) {
          rec.rfi = rfi(rec.accuracy, acc_base, count_parameters(config.variants[v].spec), m_base);
        } else {
          rec.rfi_defined = false;
          rec.rfi = std::nan("");
        }
        rec.importance = permutation_importance(*run.classifier, run.set, config.pi_repetitions,
                                                mix_seed(seed, 300 + 10 * v + c_idx));
        rec.top_hit = flags_top_items(rec.importance, config.flagged_items);
      } catch (const std::exception& e) {
        rec.error = e.what();
      }
    }
  });

  report.cells = aggregate_misspecification(config, report.records);
  return report;
}

std::vector<MisspecCellReport> aggregate_misspecification(
    const MisspecConfig& config, const std::vector<MisspecRecord>& records) {
  std::vector<MisspecCellReport> out;
  const Eigen::Index J = config.generator.spec.items();
  for (std::size_t v = 0; v < config.variants.size(); ++v) {
    for (int n : config.sizes) {
      for (ClassifierKind kind : config.classifiers) {
        MisspecCellReport cell;
        cell.variant = config.variants[v].name;
        cell.n = n;
        cell.classifier = kind;
        cell.rejection_rates.assign(config.deltas.size(), 0.0);
        cell.mean_importance = Vector::Zero(J);
        std::vector<double> rfis;
        double acc = 0.0, hits = 0.0;
        for (const auto& r : records) {
          if (r.variant != static_cast<int>(v) || r.n != n || r.classifier != kind) continue;
          if (!r.ok()) {
            ++cell.failures;
            continue;
          }
          ++cell.completed;
          acc += r.accuracy;
          hits += r.top_hit;
          for (std::size_t d = 0; d < config.deltas.size(); ++d)
            cell.rejection_rates[d] += r.p_values[d] < config.alpha;
          if (r.rfi_defined) rfis.push_back(r.rfi);
          if (r.importance.size() == J) cell.mean_importance += r.importance;
        }
        if (cell.completed > 0) {
          for (double& rate : cell.rejection_rates) rate /= cell.completed;
          cell.mean_accuracy = acc / cell.completed;
          cell.top_hit_rate = hits / cell.completed;
          cell.mean_importance /= cell.completed;
        }
        cell.median_rfi = median(rfis);
        out.push_back(cell);
      }
    }
  }
  return out;
}

// -- defaults ---------------------------------------------------------------------

namespace {

const double kMainLoadings[5] = {1.0, 1.3, 1.6, 1.9, 2.2};

Vector default_intercepts(int j, int K) {
  // Evenly spaced thresholds, shifted per item.
  Vector alpha(K - 1);
  const double start = -1.5 + 0.25 * (j % 5) - 0.25 * (K - 3);
  for (int k = 0; k < K - 1; ++k) alpha(k) = start + 1.4 * k + 0.1 * (j % 3);
  return alpha;
}

Vector raw_intercepts(const ModelSpec& spec) {
  Vector raw(spec.intercept_count());
  const auto offsets = spec.intercept_offsets();
  for (int j = 0; j < spec.items(); ++j) {
    raw.segment(offsets[j], spec.categories[j] - 1) =
        raw_from_intercepts(default_intercepts(j, spec.categories[j]));
  }
  return raw;
}

}  // namespace

Generator default_recovery_generator() {
  const int J = 10;
  std::vector<int> factor_of(J);
  for (int j = 0; j < J; ++j) factor_of[j] = j < 5 ? 0 : 1;
  Generator g;
  g.spec = simple_structure(std::vector<int>(J, 3), factor_of, 2);
  g.params.intercepts = raw_intercepts(g.spec);
  g.params.loadings.resize(J);
  for (int j = 0; j < J; ++j) g.params.loadings(j) = kMainLoadings[j < 5 ? j : 9 - j];
  g.params.angles = Vector::Constant(1, std::acos(0.3));
  return g;
}

RecoveryConfig default_recovery_config() {
  RecoveryConfig c;
  c.generator = default_recovery_generator();
  c.cells = {{1000, 5}, {5000, 5}, {5000, 1}};
  c.replications = 50;
  return c;
}

CalibrationConfig default_calibration_config() { return CalibrationConfig{}; }

MisspecConfig default_misspecification_config() {
  const int J = 10, K = 3;
  const std::vector<int> doublet{1, 2};
  std::vector<int> categories(J, K), factor_of(J);
  for (int j = 0; j < J; ++j) factor_of[j] = j < 5 ? 0 : 1;

  using Kind = LoadingEntry::Kind;
  std::vector<std::vector<LoadingEntry>> pattern(J, std::vector<LoadingEntry>(3));
  for (int j = 0; j < J; ++j) {
    pattern[j][factor_of[j]].kind = Kind::free;
    if (std::find(doublet.begin(), doublet.end(), j) != doublet.end()) {
      pattern[j][2] = {Kind::tied, 0.0, "doublet"};
    }
  }
  CorrelationStructure corr;
  corr.free = {{1, 0}};
  corr.fixed = Matrix::Constant(3, 3, std::numbers::pi / 2.0);

  MisspecConfig c;
  c.generator.spec = compile_loading_pattern(categories, 3, pattern, corr);
  c.generator.params.intercepts = raw_intercepts(c.generator.spec);
  // With five items per factor the other three items must anchor factor 0,
  // otherwise the underspecified fit tilts the factor toward the doublet.
  Matrix loadings = Matrix::Zero(J, 3);
  for (int j = 0; j < 5; ++j) loadings(j, 0) = 2.0;
  for (int j = 5; j < J; ++j) loadings(j, 1) = kMainLoadings[9 - j];
  for (int j : doublet) {
    loadings(j, 0) = 1.0;
    loadings(j, 2) = 2.0;
  }
  c.generator.params.loadings = free_loadings_from(c.generator.spec, loadings);
  c.generator.params.angles = Vector::Constant(1, std::acos(0.3));

  c.variants = {{"under", simple_structure(categories, factor_of, 2)},
                {"correct", c.generator.spec}};
  c.flagged_items = doublet;
  return c;
}

}  // namespace cifa
