#pragma once

// Importance-weighted amortized variational estimation of the GRM.

#include <optional>
#include <span>
#include <vector>

#include "cifa/grm.hpp"
#include "cifa/inference_net.hpp"

namespace cifa {

struct FitConfig {
  int iw_samples = 5;  // R
  int mc_samples = 1;  // S
  double learning_rate = 0.005;
  int batch_size = 128;
  int max_steps = 200000;
  int window = 100;         // steps per moving-average window
  double tolerance = 1e-3;  // required improvement of a window average
  int patience = 5;         // consecutive windows without improvement
  std::optional<std::vector<int>> hidden;  // default: one layer of width 2J
  std::uint64_t seed = 0;

  void validate() const;
};

/// Flat layout of the generative parameters used by the optimizer and by
/// every omega-gradient: raw intercepts, then free loadings, then free angles.
Vector pack(const ParameterSet& params);
ParameterSet unpack(const ModelSpec& spec, const Vector& flat);
Eigen::Index omega_size(const ModelSpec& spec);

struct FitResult {
  ParameterSet params;
  InferenceNet net;
  std::vector<double> trace;  // batch-mean IW-ELBO per step
  double seconds = 0.0;
  int steps = 0;
  bool converged = false;
  int skipped_steps = 0;
  int free_parameters = 0;  // dimension of the generative parameter vector

  Model model(const ModelSpec& spec) const { return materialize(spec, params); }
};

/// log p(x | z) + log N(z | 0, Sigma) - log q(z | x). Throws NumericalError
/// when Sigma is singular.
double log_weight(const Model& model, std::span<const int> x, const Vector& z,
                  const PosteriorParams& post);

/// Standard normal draws, one column per (observation, mc sample, iw sample):
/// column (i * S + s) * R + r.
Matrix draw_noise(int observations, int R, int S, int factors, Rng& rng);

enum class PsiEstimator { none, dreg, pathwise };

struct BatchGradient {
  double objective = 0.0;  // sum over the batch of the per-observation estimate
  Vector omega;            // d objective / d pack(params)
  Vector psi;              // d objective / d net parameters
  int degenerate = 0;      // observations whose log-weights were all -inf
};

/// Monte Carlo IW-ELBO of `rows` with fixed noise, optionally with gradients.
/// The per-observation estimate is S^-1 sum_s log(R^-1 sum_r w_{r,s}).
/// Throws NumericalError if a log-weight is NaN or +inf.
BatchGradient evaluate_batch(const ModelSpec& spec, const ParameterSet& params,
                             const InferenceNet& net, const ResponseMatrix& data,
                             std::span<const int> rows, int R, int S,
                             const Matrix& noise, bool want_omega, PsiEstimator psi,
                             Vector* per_observation = nullptr);

/// Convenience wrappers drawing their own noise from `seed`.
double iw_elbo_estimate(const ModelSpec& spec, const ParameterSet& params,
                        const InferenceNet& net, const ResponseMatrix& data,
                        std::span<const int> rows, int R, int S, std::uint64_t seed);
Vector grad_omega(const ModelSpec& spec, const ParameterSet& params,
                  const InferenceNet& net, const ResponseMatrix& data,
                  std::span<const int> rows, int R, std::uint64_t seed);
Vector grad_psi_dreg(const ModelSpec& spec, const ParameterSet& params,
                     const InferenceNet& net, const ResponseMatrix& data,
                     std::span<const int> rows, int R, std::uint64_t seed);

/// Per-observation IW-ELBO (S = 1) over every row of `data`.
Vector iw_elbo_per_observation(const ModelSpec& spec, const ParameterSet& params,
                               const InferenceNet& net, const ResponseMatrix& data,
                               int R, std::uint64_t seed);

/// Adam with the AMSGrad max on the second moment. step() descends.
class AmsGrad {
 public:
  AmsGrad(Eigen::Index size, double learning_rate, double beta1 = 0.9,
          double beta2 = 0.999, double eps = 1e-8);

  void step(Vector& params, const Vector& grad);

  const Vector& max_second_moment() const { return v_max_; }
  long iterations() const { return t_; }

 private:
  double lr_, beta1_, beta2_, eps_;
  long t_ = 0;
  Vector m_, v_, v_max_;
};

/// Loadings uniform in +-sqrt(6 / (M_p + P)) where M_p counts non-fixed
/// loading entries on factor p; free angles pi/2; first intercept uniform in
/// (-1.5, -0.5) with unit increments.
ParameterSet init_params(const ModelSpec& spec, std::uint64_t seed);

/// Throws NumericalError if the objective or a gradient becomes non-finite.
FitResult fit(const ResponseMatrix& data, const ModelSpec& spec,
              const FitConfig& config);

}  // namespace cifa
