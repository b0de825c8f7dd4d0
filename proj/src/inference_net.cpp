#include "cifa/inference_net.hpp"

#include <cmath>
#include <numbers>
#include <string>

namespace cifa {

Vector reparameterize(const PosteriorParams& post, const Vector& eps) {
  return post.mean.array() + post.log_sd.array().exp() * eps.array();
}

void reparameterize_backward(const PosteriorParams& post, const Vector& eps,
                             const Vector& d_z, Vector& d_mean, Vector& d_log_sd) {
  d_mean += d_z;
  d_log_sd.array() += d_z.array() * post.log_sd.array().exp() * eps.array();
}

double log_q(const Vector& z, const PosteriorParams& post) {
  const double P = static_cast<double>(z.size());
  const auto u = (z - post.mean).array() * (-post.log_sd.array()).exp();
  return -0.5 * P * std::log(2.0 * std::numbers::pi) - post.log_sd.sum() -
         0.5 * u.square().sum();
}

InferenceNet::InferenceNet(std::vector<int> categories, int factors,
                           std::vector<int> hidden)
    : categories_(std::move(categories)), hidden_(std::move(hidden)), factors_(factors) {
  if (factors_ < 1) throw std::invalid_argument("inference net needs P >= 1");
  for (int k : categories_) {
    if (k < 2) throw std::invalid_argument("inference net: items need >= 2 categories");
    offsets_.push_back(input_width_);
    input_width_ += k;
  }
  if (input_width_ == 0) throw std::invalid_argument("inference net: no items");
  int in = input_width_;
  Eigen::Index at = 0;
  std::vector<int> widths = hidden_;
  widths.push_back(output_width());
  for (int w : widths) {
    if (w < 1) throw std::invalid_argument("hidden widths must be positive");
    layers_.push_back({at, at + static_cast<Eigen::Index>(w) * in, in, w});
    at += static_cast<Eigen::Index>(w) * in + w;
    in = w;
  }
  params_ = Vector::Zero(at);
}

void InferenceNet::initialize(std::uint64_t seed) {
  Rng rng(seed);
  params_.setZero();
  for (const auto& l : layers_) {
    const double bound = std::sqrt(6.0 / (l.in + l.out));
    std::uniform_real_distribution<double> u(-bound, bound);
    for (Eigen::Index i = 0; i < static_cast<Eigen::Index>(l.in) * l.out; ++i) {
      params_(l.weight_offset + i) = u(rng);
    }
  }
}

void InferenceNet::active_indices(std::span<const int> x, std::vector<int>& out) const {
  if (x.size() != categories_.size()) {
    throw std::invalid_argument("response pattern has " + std::to_string(x.size()) +
                                " items, net expects " +
                                std::to_string(categories_.size()));
  }
  out.resize(x.size());
  for (std::size_t j = 0; j < x.size(); ++j) {
    if (x[j] < 0 || x[j] >= categories_[j]) {
      throw std::out_of_range("item " + std::to_string(j) + ": category code " +
                              std::to_string(x[j]) + " outside 0.." +
                              std::to_string(categories_[j] - 1));
    }
    out[j] = offsets_[j] + x[j];
  }
}

Vector InferenceNet::one_hot(std::span<const int> x) const {
  std::vector<int> idx;
  active_indices(x, idx);
  Vector v = Vector::Zero(input_width_);
  for (int i : idx) v(i) = 1.0;
  return v;
}

namespace {

inline double elu(double x) { return x > 0.0 ? x : std::expm1(x); }
inline double elu_grad(double x) { return x > 0.0 ? 1.0 : std::exp(x); }

}  // namespace

Vector InferenceNet::forward(std::span<const int> x, Cache* cache) const {
  Cache local;
  Cache& c = cache ? *cache : local;
  c.valid = false;
  active_indices(x, c.active);
  c.pre.resize(hidden_.size());
  c.activation.resize(hidden_.size());

  // First layer: the one-hot input selects J columns of W.
  const Layer& first = layers_.front();
  const auto W0 = weights(first);
  Vector h = bias(first);
  for (int i : c.active) h += W0.col(i);

  for (std::size_t l = 1; l < layers_.size(); ++l) {
    c.pre[l - 1] = h;
    c.activation[l - 1] = h.unaryExpr([](double v) { return elu(v); });
    h = weights(layers_[l]) * c.activation[l - 1] + bias(layers_[l]);
  }
  c.valid = true;
  return h;
}

PosteriorParams InferenceNet::encode(std::span<const int> x) const {
  Vector out = forward(x);
  return {out.head(factors_), out.tail(factors_)};
}

void InferenceNet::backward(const Cache& cache, const Vector& d_out, Vector& grad) const {
  if (!cache.valid) throw std::logic_error("backward() called without a forward pass");
  if (d_out.size() != output_width()) {
    throw std::invalid_argument("output sensitivity has the wrong length");
  }
  if (grad.size() != params_.size()) {
    throw std::invalid_argument("gradient buffer has the wrong length");
  }
  Vector delta = d_out;
  for (std::size_t l = layers_.size() - 1; l >= 1; --l) {
    const Layer& layer = layers_[l];
    const Vector& input = cache.activation[l - 1];
    Eigen::Map<Matrix> dW(grad.data() + layer.weight_offset, layer.out, layer.in);
    dW.noalias() += delta * input.transpose();
    grad.segment(layer.bias_offset, layer.out) += delta;
    Vector back = weights(layer).transpose() * delta;
    const Vector& pre = cache.pre[l - 1];
    for (Eigen::Index i = 0; i < back.size(); ++i) back(i) *= elu_grad(pre(i));
    delta = std::move(back);
  }
  const Layer& first = layers_.front();
  Eigen::Map<Matrix> dW0(grad.data() + first.weight_offset, first.out, first.in);
  for (int i : cache.active) dW0.col(i) += delta;
  grad.segment(first.bias_offset, first.out) += delta;
}

}  // namespace cifa
