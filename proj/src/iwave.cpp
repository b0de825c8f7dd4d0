#include "cifa/iwave.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>

namespace cifa {

void FitConfig::validate() const {
  if (iw_samples < 1) throw std::invalid_argument("iw_samples must be >= 1");
  if (mc_samples < 1) throw std::invalid_argument("mc_samples must be >= 1");
  if (!(learning_rate > 0.0)) throw std::invalid_argument("learning_rate must be > 0");
  if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  if (max_steps < 1) throw std::invalid_argument("max_steps must be >= 1");
  if (window < 1) throw std::invalid_argument("window must be >= 1");
  if (patience < 1) throw std::invalid_argument("patience must be >= 1");
  if (!(tolerance >= 0.0)) throw std::invalid_argument("tolerance must be >= 0");
}

Eigen::Index omega_size(const ModelSpec& spec) {
  return spec.intercept_count() + spec.free_loadings +
         static_cast<Eigen::Index>(spec.correlation.free.size());
}

Vector pack(const ParameterSet& params) {
  Vector flat(params.intercepts.size() + params.loadings.size() + params.angles.size());
  flat << params.intercepts, params.loadings, params.angles;
  return flat;
}

ParameterSet unpack(const ModelSpec& spec, const Vector& flat) {
  if (flat.size() < omega_size(spec)) throw std::invalid_argument("flat vector too short");
  const Eigen::Index a = spec.intercept_count(), q = spec.free_loadings;
  const Eigen::Index t = static_cast<Eigen::Index>(spec.correlation.free.size());
  return {flat.segment(0, a), flat.segment(a, q), flat.segment(a + q, t)};
}

namespace {

constexpr double kLog2Pi = 1.8378770664093454836;

// Scratch for one observation's R x S draws, reused across the batch.
struct Workspace {
  Matrix z, u, v;            // P x (R*S)
  Matrix d_lower, d_upper;   // J x (R*S), d log pi / d alpha below / above x
  Matrix dz_lik;             // P x (R*S)
  Vector log_w;              // R*S
  Vector eta;

  void resize(int J, int P, int draws) {
    z.resize(P, draws);
    u.resize(P, draws);
    v.resize(P, draws);
    d_lower.resize(J, draws);
    d_upper.resize(J, draws);
    dz_lik.resize(P, draws);
    log_w.resize(draws);
  }
};

double log_prior(const Matrix& L, const Vector& z, Vector& u, double log_det) {
  u = L.triangularView<Eigen::Lower>().solve(z);
  return -0.5 * static_cast<double>(z.size()) * kLog2Pi - log_det - 0.5 * u.squaredNorm();
}

double half_log_det(const Matrix& L) {
  double s = 0.0;
  for (Eigen::Index p = 0; p < L.rows(); ++p) {
    if (L(p, p) == 0.0) throw NumericalError("correlation matrix is singular");
    s += std::log(std::abs(L(p, p)));
  }
  return s;
}

// Log-likelihood of one pattern at one z. d/d eta_j is d_lower(j) + d_upper(j).
double log_lik_column(const Model& model, std::span<const int> x, const Vector& z,
                      Vector& eta, Eigen::Ref<Vector> d_lower, Eigen::Ref<Vector> d_upper) {
  eta.noalias() = model.loadings * z;
  double total = 0.0;
  for (int j = 0; j < model.items(); ++j) {
    const Vector& a = model.intercepts[j];
    double dl, du;
    total += log_category_prob({a.data(), static_cast<std::size_t>(a.size())}, x[j],
                               eta(j), dl, du);
    d_lower(j) = dl;
    d_upper(j) = du;
  }
  return total;
}

}  // namespace

double log_weight(const Model& model, std::span<const int> x, const Vector& z,
                  const PosteriorParams& post) {
  const Matrix& L = model.correlation.lower;
  Vector u;
  return log_cond_likelihood(model, x, z) + log_prior(L, z, u, half_log_det(L)) -
         log_q(z, post);
}

Matrix draw_noise(int observations, int R, int S, int factors, Rng& rng) {
  std::normal_distribution<double> normal;
  Matrix out(factors, static_cast<Eigen::Index>(observations) * R * S);
  for (Eigen::Index c = 0; c < out.cols(); ++c)
    for (Eigen::Index p = 0; p < factors; ++p) out(p, c) = normal(rng);
  return out;
}

BatchGradient evaluate_batch(const ModelSpec& spec, const ParameterSet& params,
                             const InferenceNet& net, const ResponseMatrix& data,
                             std::span<const int> rows, int R, int S,
                             const Matrix& noise, bool want_omega, PsiEstimator psi,
                             Vector* per_observation) {
  if (R < 1 || S < 1) throw std::invalid_argument("R and S must be >= 1");
  const int J = spec.items(), P = spec.factors;
  if (P < 1) throw std::invalid_argument("IW-ELBO needs at least one factor");
  const int draws = R * S;
  const Eigen::Index n = static_cast<Eigen::Index>(rows.size());
  if (noise.rows() != P || noise.cols() != n * draws) {
    throw std::invalid_argument("noise matrix has the wrong shape");
  }
  if (data.cols() != J) throw std::invalid_argument("data width differs from spec");

  const Model model = materialize(spec, params);
  const Matrix& L = model.correlation.lower;
  const double log_det = half_log_det(L);
  const Vector inv_diag = L.diagonal().cwiseInverse();

  BatchGradient out;
  std::vector<Vector> d_alpha;
  Matrix d_beta, d_L;
  if (want_omega) {
    for (const auto& a : model.intercepts) d_alpha.push_back(Vector::Zero(a.size()));
    d_beta = Matrix::Zero(J, P);
    d_L = Matrix::Zero(P, P);
  }
  if (psi != PsiEstimator::none) out.psi = Vector::Zero(net.parameter_count());
  if (per_observation) per_observation->resize(n);

  Workspace ws;
  ws.resize(J, P, draws);
  InferenceNet::Cache cache;
  Vector zcol(P), ucol(P), d_out(2 * P), wt(draws);

  for (Eigen::Index i = 0; i < n; ++i) {
    const int row = rows[i];
    if (row < 0 || row >= data.rows()) throw std::out_of_range("batch row index");
    std::span<const int> x(data.data() + static_cast<Eigen::Index>(row) * J, J);
    for (int j = 0; j < J; ++j) {
      if (x[j] < 0 || x[j] >= spec.categories[j]) {
        throw std::out_of_range("row " + std::to_string(row) + ", item " +
                                std::to_string(j) + ": invalid category code");
      }
    }
    const Vector out_net = net.forward(x, psi != PsiEstimator::none ? &cache : nullptr);
    const Vector mu = out_net.head(P), log_sd = out_net.tail(P);
    const Vector sd = log_sd.array().exp();
    const double log_q_const = -0.5 * P * kLog2Pi - log_sd.sum();

    for (int d = 0; d < draws; ++d) {
      const auto eps = noise.col(i * draws + d);
      zcol = mu.array() + sd.array() * eps.array();
      ws.z.col(d) = zcol;
      double lw = log_lik_column(model, x, zcol, ws.eta, ws.d_lower.col(d),
                                 ws.d_upper.col(d));
      lw += log_prior(L, zcol, ucol, log_det);
      lw -= log_q_const - 0.5 * eps.squaredNorm();
      ws.u.col(d) = ucol;
      ws.log_w(d) = lw;
    }

    double obs_value = 0.0;
    bool degenerate = false;
    for (int s = 0; s < S; ++s) {
      const auto lw = ws.log_w.segment(s * R, R);
      if (lw.array().isNaN().any() || (lw.array() == std::numeric_limits<double>::infinity()).any()) {
        throw NumericalError("non-finite log-weight at batch row " + std::to_string(row));
      }
      const double mx = lw.maxCoeff();
      if (mx == -std::numeric_limits<double>::infinity()) {
        degenerate = true;
        break;
      }
      const double lse = mx + std::log((lw.array() - mx).exp().sum());
      obs_value += (lse - std::log(static_cast<double>(R))) / S;
      wt.segment(s * R, R) = (lw.array() - lse).exp();
    }
    if (degenerate) {
      ++out.degenerate;
      if (per_observation) (*per_observation)(i) = -std::numeric_limits<double>::infinity();
      continue;
    }
    out.objective += obs_value;
    if (per_observation) (*per_observation)(i) = obs_value;
    if (!want_omega && psi == PsiEstimator::none) continue;

    // d log p(x, z) / d z for every draw; v = L^-T u gives the prior part.
    for (int d = 0; d < draws; ++d) {
      Vector d_eta = ws.d_lower.col(d) + ws.d_upper.col(d);
      ws.dz_lik.col(d).noalias() = model.loadings.transpose() * d_eta;
      ws.v.col(d) = L.transpose().triangularView<Eigen::Upper>().solve(ws.u.col(d));
    }

    if (want_omega) {
      for (int d = 0; d < draws; ++d) {
        const double c = wt(d) / S;
        for (int j = 0; j < J; ++j) {
          if (x[j] > 0) d_alpha[j](x[j] - 1) += c * ws.d_lower(j, d);
          if (x[j] < spec.categories[j] - 1) d_alpha[j](x[j]) += c * ws.d_upper(j, d);
        }
        const Vector d_eta = ws.d_lower.col(d) + ws.d_upper.col(d);
        d_beta.noalias() += c * d_eta * ws.z.col(d).transpose();
        d_L.noalias() += c * ws.v.col(d) * ws.u.col(d).transpose();
        d_L.diagonal() -= c * inv_diag;
      }
    }

    if (psi != PsiEstimator::none) {
      d_out.setZero();
      for (int d = 0; d < draws; ++d) {
        const auto eps = noise.col(i * draws + d);
        // d log p(x, z) / dz
        const Vector dlogp = ws.dz_lik.col(d) - ws.v.col(d);
        if (psi == PsiEstimator::dreg) {
          const double c = wt(d) * wt(d) / S;
          const Vector g = dlogp.array() + eps.array() / sd.array();
          d_out.head(P) += c * g;
          d_out.tail(P).array() += c * g.array() * sd.array() * eps.array();
        } else {
          const double c = wt(d) / S;
          d_out.head(P) += c * dlogp;
          d_out.tail(P).array() += c * (dlogp.array() * sd.array() * eps.array() + 1.0);
        }
      }
      net.backward(cache, d_out, out.psi);
    }
  }

  if (want_omega) {
    out.omega.resize(omega_size(spec));
    const auto offsets = spec.intercept_offsets();
    for (int j = 0; j < J; ++j) {
      const int len = spec.categories[j] - 1;
      out.omega.segment(offsets[j], len) = raw_intercept_gradient(
          {params.intercepts.data() + offsets[j], static_cast<std::size_t>(len)},
          d_alpha[j]);
    }
    const Eigen::Index a = spec.intercept_count();
    out.omega.segment(a, spec.free_loadings) = constraint_gradient(spec, d_beta);
    const Matrix theta = assemble_angles(spec, params.angles);
    const Matrix d_theta = angle_gradient(theta, d_L.triangularView<Eigen::Lower>());
    for (std::size_t k = 0; k < spec.correlation.free.size(); ++k) {
      auto [r, c] = spec.correlation.free[k];
      out.omega(a + spec.free_loadings + static_cast<Eigen::Index>(k)) = d_theta(r, c);
    }
  }
  return out;
}

double iw_elbo_estimate(const ModelSpec& spec, const ParameterSet& params,
                        const InferenceNet& net, const ResponseMatrix& data,
                        std::span<const int> rows, int R, int S, std::uint64_t seed) {
  Rng rng(seed);
  const Matrix noise = draw_noise(static_cast<int>(rows.size()), R, S, spec.factors, rng);
  return evaluate_batch(spec, params, net, data, rows, R, S, noise, false,
                        PsiEstimator::none)
      .objective;
}

Vector grad_omega(const ModelSpec& spec, const ParameterSet& params,
                  const InferenceNet& net, const ResponseMatrix& data,
                  std::span<const int> rows, int R, std::uint64_t seed) {
  Rng rng(seed);
  const Matrix noise = draw_noise(static_cast<int>(rows.size()), R, 1, spec.factors, rng);
  return evaluate_batch(spec, params, net, data, rows, R, 1, noise, true,
                        PsiEstimator::none)
      .omega;
}

Vector grad_psi_dreg(const ModelSpec& spec, const ParameterSet& params,
                     const InferenceNet& net, const ResponseMatrix& data,
                     std::span<const int> rows, int R, std::uint64_t seed) {
  Rng rng(seed);
  const Matrix noise = draw_noise(static_cast<int>(rows.size()), R, 1, spec.factors, rng);
  return evaluate_batch(spec, params, net, data, rows, R, 1, noise, false,
                        PsiEstimator::dreg)
      .psi;
}

Vector iw_elbo_per_observation(const ModelSpec& spec, const ParameterSet& params,
                               const InferenceNet& net, const ResponseMatrix& data,
                               int R, std::uint64_t seed) {
  std::vector<int> rows(static_cast<std::size_t>(data.rows()));
  std::iota(rows.begin(), rows.end(), 0);
  Rng rng(seed);
  const Matrix noise = draw_noise(static_cast<int>(rows.size()), R, 1, spec.factors, rng);
  Vector values;
  evaluate_batch(spec, params, net, data, rows, R, 1, noise, false, PsiEstimator::none,
                 &values);
  return values;
}

// -- optimizer ------------------------------------------------------------------

AmsGrad::AmsGrad(Eigen::Index size, double learning_rate, double beta1, double beta2,
                 double eps)
    : lr_(learning_rate), beta1_(beta1), beta2_(beta2), eps_(eps),
      m_(Vector::Zero(size)), v_(Vector::Zero(size)), v_max_(Vector::Zero(size)) {}

void AmsGrad::step(Vector& params, const Vector& grad) {
  if (params.size() != m_.size() || grad.size() != m_.size()) {
    throw std::invalid_argument("optimizer state has a different size");
  }
  ++t_;
  m_ = beta1_ * m_ + (1.0 - beta1_) * grad;
  v_ = beta2_ * v_ + (1.0 - beta2_) * grad.cwiseAbs2();
  v_max_ = v_max_.cwiseMax(v_);
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  const auto denom = v_max_.array().sqrt() / std::sqrt(bc2) + eps_;
  params.array() -= (lr_ / bc1) * m_.array() / denom;
}

// -- fitting ----------------------------------------------------------------------

ParameterSet init_params(const ModelSpec& spec, std::uint64_t seed) {
  spec.validate();
  const int J = spec.items(), P = spec.factors, Q = spec.free_loadings;
  Rng rng(seed);

  // M_p: loading entries on factor p that are not fixed.
  std::vector<int> free_on(P, 0);
  std::vector<int> factor_of_column(Q, -1);
  for (int j = 0; j < J; ++j) {
    for (int p = 0; p < P; ++p) {
      bool any = false;
      for (int q = 0; q < Q; ++q) {
        if (spec.loading_map[j](p, q) != 0.0) {
          any = true;
          if (factor_of_column[q] < 0) factor_of_column[q] = p;
        }
      }
      if (any) ++free_on[p];
    }
  }

  ParameterSet out;
  out.loadings.resize(Q);
  for (int q = 0; q < Q; ++q) {
    const int p = factor_of_column[q];
    if (p < 0) {
      out.loadings(q) = 0.0;  // column unused by every item
      continue;
    }
    const double bound = std::sqrt(6.0 / (free_on[p] + P));
    out.loadings(q) = std::uniform_real_distribution<double>(-bound, bound)(rng);
  }

  out.intercepts.resize(spec.intercept_count());
  const double unit_step = softplus_inverse(1.0);
  std::uniform_real_distribution<double> first(-1.5, -0.5);
  const auto offsets = spec.intercept_offsets();
  for (int j = 0; j < J; ++j) {
    out.intercepts(offsets[j]) = first(rng);
    for (int k = 1; k < spec.categories[j] - 1; ++k) out.intercepts(offsets[j] + k) = unit_step;
  }
  out.angles = Vector::Constant(static_cast<Eigen::Index>(spec.correlation.free.size()),
                                std::numbers::pi / 2.0);
  return out;
}

FitResult fit(const ResponseMatrix& data, const ModelSpec& spec, const FitConfig& config) {
  const auto started = std::chrono::steady_clock::now();
  config.validate();
  spec.validate();
  if (spec.factors < 1) {
    throw std::invalid_argument("fit needs P >= 1; the zero-factor model has a closed form");
  }
  validate_responses(data, spec.categories);
  const int N = static_cast<int>(data.rows());
  if (N == 0) throw std::invalid_argument("cannot fit an empty data set");

  FitResult result;
  result.params = init_params(spec, mix_seed(config.seed, 0));
  result.net = InferenceNet(spec.categories, spec.factors,
                            config.hidden.value_or(std::vector<int>{2 * spec.items()}));
  result.net.initialize(mix_seed(config.seed, 1));
  result.free_parameters = static_cast<int>(omega_size(spec));

  Rng rng(mix_seed(config.seed, 2));
  const Eigen::Index n_omega = omega_size(spec);
  Vector theta(n_omega + result.net.parameter_count());
  theta << pack(result.params), result.net.parameters();
  AmsGrad opt(theta.size(), config.learning_rate);

  std::vector<int> order(N);
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();

  double best = -std::numeric_limits<double>::infinity();
  double window_sum = 0.0;
  int window_fill = 0, stalls = 0;
  long attempts = 0;

  while (result.steps < config.max_steps) {
    if (++attempts > 2L * config.max_steps + 100) {
      throw NumericalError("too many degenerate batches");
    }
    if (cursor >= order.size()) {
      std::shuffle(order.begin(), order.end(), rng);
      cursor = 0;
    }
    const std::size_t take = std::min<std::size_t>(config.batch_size, order.size() - cursor);
    std::span<const int> rows(order.data() + cursor, take);
    cursor += take;

    const Matrix noise = draw_noise(static_cast<int>(take), config.iw_samples,
                                    config.mc_samples, spec.factors, rng);
    BatchGradient g = evaluate_batch(spec, result.params, result.net, data, rows,
                                     config.iw_samples, config.mc_samples, noise, true,
                                     PsiEstimator::dreg);
    if (g.degenerate > 0) {
      ++result.skipped_steps;
      continue;
    }
    const double scale = 1.0 / static_cast<double>(take);
    const double value = g.objective * scale;
    Vector grad(theta.size());
    grad << g.omega, g.psi;
    grad *= scale;
    if (!std::isfinite(value) || !grad.allFinite()) {
      throw NumericalError("objective diverged at step " + std::to_string(result.steps));
    }
    opt.step(theta, -grad);
    if (!theta.allFinite()) {
      throw NumericalError("parameters diverged at step " + std::to_string(result.steps));
    }
    result.params = unpack(spec, theta);
    result.net.parameters() = theta.tail(result.net.parameter_count());
    result.trace.push_back(value);
    ++result.steps;

    window_sum += value;
    if (++window_fill == config.window) {
      const double avg = window_sum / config.window;
      window_sum = 0.0;
      window_fill = 0;
      if (avg > best + config.tolerance) {
        best = avg;
        stalls = 0;
      } else if (++stalls >= config.patience) {
        result.converged = true;
        break;
      }
    }
  }

  result.params.angles = canonical_free_angles(spec, result.params.angles);
  result.seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return result;
}

}  // namespace cifa
