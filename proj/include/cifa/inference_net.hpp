#pragma once

#include <span>
#include <vector>

#include "cifa/types.hpp"

namespace cifa {

/// Isotropic normal q(z | x) = N(mean, diag(exp(log_sd))^2).
struct PosteriorParams {
  Vector mean;
  Vector log_sd;
};

/// z = mean + exp(log_sd) * eps.
Vector reparameterize(const PosteriorParams& post, const Vector& eps);

/// Adds the pullback of d_z through reparameterize into d_mean / d_log_sd.
void reparameterize_backward(const PosteriorParams& post, const Vector& eps,
                             const Vector& d_z, Vector& d_mean, Vector& d_log_sd);

double log_q(const Vector& z, const PosteriorParams& post);

/// Feed-forward encoder from a one-hot response pattern to (mean, log_sd).
///
/// Layers are affine maps with ELU between them and a linear output of width
/// 2P (means first). All weights and biases live in one flat vector, layer by
/// layer, each layer as W (column-major, out x in) followed by b.
class InferenceNet {
 public:
  struct Cache {
    std::vector<int> active;         // one-hot indices of the input
    std::vector<Vector> pre;         // pre-activations of hidden layers
    std::vector<Vector> activation;  // outputs of hidden layers
    bool valid = false;
  };

  InferenceNet() = default;
  InferenceNet(std::vector<int> categories, int factors, std::vector<int> hidden);

  /// Xavier-uniform weights, zero biases.
  void initialize(std::uint64_t seed);

  const std::vector<int>& categories() const { return categories_; }
  const std::vector<int>& hidden() const { return hidden_; }
  int factors() const { return factors_; }
  int input_width() const { return input_width_; }
  int output_width() const { return 2 * factors_; }

  Vector& parameters() { return params_; }
  const Vector& parameters() const { return params_; }
  Eigen::Index parameter_count() const { return params_.size(); }

  /// Dense one-hot encoding; throws std::out_of_range on a bad code.
  Vector one_hot(std::span<const int> x) const;

  /// Output vector (mean, log_sd). Fills `cache` for a later backward().
  Vector forward(std::span<const int> x, Cache* cache = nullptr) const;
  PosteriorParams encode(std::span<const int> x) const;

  /// Adds d(objective)/d(params) into `grad` given d(objective)/d(output).
  /// Throws std::logic_error unless `cache` came from a forward() call.
  void backward(const Cache& cache, const Vector& d_out, Vector& grad) const;

 private:
  struct Layer {
    Eigen::Index weight_offset;
    Eigen::Index bias_offset;
    int in;
    int out;
  };

  Eigen::Map<const Matrix> weights(const Layer& l) const {
    return {params_.data() + l.weight_offset, l.out, l.in};
  }
  Eigen::Map<const Vector> bias(const Layer& l) const {
    return {params_.data() + l.bias_offset, l.out};
  }
  void active_indices(std::span<const int> x, std::vector<int>& out) const;

  std::vector<int> categories_;
  std::vector<int> offsets_;  // start of item j in the one-hot input
  std::vector<int> hidden_;
  int factors_ = 0;
  int input_width_ = 0;
  std::vector<Layer> layers_;
  Vector params_;
};

}  // namespace cifa
