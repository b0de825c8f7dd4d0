#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "cifa/c2st.hpp"

namespace cifa {

std::string to_string(ClassifierKind kind) {
  return kind == ClassifierKind::knn ? "knn" : "nn";
}

ClassifierKind classifier_kind_from_string(const std::string& name) {
  if (name == "knn") return ClassifierKind::knn;
  if (name == "nn" || name == "neural") return ClassifierKind::neural;
  throw std::invalid_argument("unknown classifier '" + name + "' (expected knn or nn)");
}

namespace {

void check_nonempty(const LabeledSet& set) {
  if (set.train.empty() || set.test.empty()) {
    throw std::invalid_argument("classifier needs nonempty train and test sets");
  }
  if (set.labels.size() != static_cast<std::size_t>(set.features.rows())) {
    throw std::invalid_argument("label count differs from row count");
  }
}

Matrix gather_rows(const Matrix& m, const std::vector<int>& rows) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(rows[i]);
  return out;
}

// -- nearest neighbours -----------------------------------------------------------

class KnnClassifier final : public Classifier {
 public:
  KnnClassifier(Matrix train, std::vector<int> labels, int k, bool hamming)
      : train_(std::move(train)), labels_(std::move(labels)), k_(k), hamming_(hamming) {
    if (hamming_) codes_ = train_.cast<int>();
  }

  ClassifierKind kind() const override { return ClassifierKind::knn; }

  std::map<std::string, double> hyperparameters() const override {
    return {{"k", k_},
            {"train_rows", static_cast<double>(train_.rows())},
            {"hamming", hamming_ ? 1.0 : 0.0}};
  }

  Vector predict(const Matrix& rows) const override {
    if (rows.cols() != train_.cols()) {
      throw std::invalid_argument("prediction rows have the wrong width");
    }
    Vector out(rows.rows());
    for (Eigen::Index i = 0; i < rows.rows(); ++i) {
      out(i) = hamming_ ? predict_hamming(rows.row(i)) : predict_euclidean(rows.row(i));
    }
    return out;
  }

 private:
  double predict_hamming(const Eigen::RowVectorXd& row) const {
    const Eigen::Index J = train_.cols(), n = train_.rows();
    Eigen::RowVectorXi x = row.cast<int>();
    std::vector<int> dist(static_cast<std::size_t>(n));
    std::vector<int> count(J + 1, 0), positives(J + 1, 0);
    for (Eigen::Index t = 0; t < n; ++t) {
      int d = 0;
      for (Eigen::Index j = 0; j < J; ++j) d += codes_(t, j) != x(j);
      dist[t] = d;
      ++count[d];
      positives[d] += labels_[t];
    }
    int taken = 0, sum = 0, boundary = 0;
    for (; boundary <= J; ++boundary) {
      if (taken + count[boundary] >= k_) break;
      taken += count[boundary];
      sum += positives[boundary];
    }
    for (Eigen::Index t = 0; t < n && taken < k_; ++t) {
      if (dist[t] == boundary) {
        ++taken;
        sum += labels_[t];
      }
    }
    return static_cast<double>(sum) / k_;
  }

  double predict_euclidean(const Eigen::RowVectorXd& row) const {
    const Eigen::Index n = train_.rows();
    std::vector<std::pair<double, int>> d(static_cast<std::size_t>(n));
    for (Eigen::Index t = 0; t < n; ++t) {
      d[t] = {(train_.row(t) - row).squaredNorm(), static_cast<int>(t)};
    }
    std::nth_element(d.begin(), d.begin() + (k_ - 1), d.end());
    int sum = 0;
    for (int m = 0; m < k_; ++m) sum += labels_[d[m].second];
    return static_cast<double>(sum) / k_;
  }

  Matrix train_;
  Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> codes_;
  std::vector<int> labels_;
  int k_;
  bool hamming_;
};

// -- neural network -------------------------------------------------------------

// Maps feature rows to network inputs (one column per observation).
struct InputEncoder {
  std::vector<int> categories, offsets;
  Vector mean, scale;
  int width = 0;

  static InputEncoder fit(const LabeledSet& set) {
    InputEncoder enc;
    if (set.categorical()) {
      enc.categories = set.categories;
      for (int k : enc.categories) {
        enc.offsets.push_back(enc.width);
        enc.width += k;
      }
    } else {
      const Matrix train = gather_rows(set.features, set.train);
      enc.mean = train.colwise().mean().transpose();
      enc.scale = ((train.rowwise() - enc.mean.transpose()).array().square().colwise().sum() /
                   static_cast<double>(train.rows()))
                      .sqrt()
                      .transpose();
      for (Eigen::Index c = 0; c < enc.scale.size(); ++c)
        if (!(enc.scale(c) > 0.0)) enc.scale(c) = 1.0;
      enc.width = static_cast<int>(set.features.cols());
    }
    return enc;
  }

  Matrix operator()(const Matrix& rows) const {
    Matrix X = Matrix::Zero(width, rows.rows());
    if (!categories.empty()) {
      if (rows.cols() != static_cast<Eigen::Index>(categories.size())) {
        throw std::invalid_argument("prediction rows have the wrong width");
      }
      for (Eigen::Index i = 0; i < rows.rows(); ++i) {
        for (std::size_t j = 0; j < categories.size(); ++j) {
          const int code = static_cast<int>(rows(i, static_cast<Eigen::Index>(j)));
          if (code < 0 || code >= categories[j]) {
            throw std::out_of_range("category code out of range in classifier input");
          }
          X(offsets[j] + code, i) = 1.0;
        }
      }
    } else {
      if (rows.cols() != width) throw std::invalid_argument("prediction rows have the wrong width");
      X = ((rows.rowwise() - mean.transpose()).array().rowwise() / scale.transpose().array())
              .matrix()
              .transpose();
    }
    return X;
  }
};

// Flat parameter vector: W1 (H x D), b1 (H), w2 (H), b2.
struct Mlp {
  int in = 0, hidden = 0;
  Vector theta;

  Mlp(int in_, int hidden_) : in(in_), hidden(hidden_), theta(size(in_, hidden_)) {}
  static Eigen::Index size(int d, int h) { return static_cast<Eigen::Index>(h) * d + 2 * h + 1; }

  Eigen::Map<const Matrix> W1() const { return {theta.data(), hidden, in}; }
  Eigen::Map<const Vector> b1() const { return {theta.data() + hidden * in, hidden}; }
  Eigen::Map<const Vector> w2() const { return {theta.data() + hidden * in + hidden, hidden}; }
  double b2() const { return theta(theta.size() - 1); }

  void initialize(Rng& rng) {
    const double hb = std::sqrt(6.0 / (in + hidden));
    const double ob = std::sqrt(2.0 / (hidden + 1));
    std::uniform_real_distribution<double> uh(-hb, hb), uo(-ob, ob);
    const Eigen::Index first = static_cast<Eigen::Index>(hidden) * in + hidden;
    for (Eigen::Index i = 0; i < first; ++i) theta(i) = uh(rng);
    for (Eigen::Index i = first; i < theta.size(); ++i) theta(i) = uo(rng);
  }

  Vector logits(const Matrix& X) const {
    Matrix A = ((W1() * X).colwise() + b1()).cwiseMax(0.0);
    return (A.transpose() * w2()).array() + b2();
  }

  // Penalized mean log-loss of a batch; gradient written into `grad`.
  double loss_and_grad(const Matrix& X, const Vector& y, double alpha, Vector& grad) const {
    const double B = static_cast<double>(X.cols());
    Matrix Z = (W1() * X).colwise() + b1();
    Matrix A = Z.cwiseMax(0.0);
    Vector o = (A.transpose() * w2()).array() + b2();
    double loss = 0.0;
    Vector delta(o.size());
    for (Eigen::Index i = 0; i < o.size(); ++i) {
      loss += softplus(o(i)) - y(i) * o(i);
      delta(i) = (sigmoid(o(i)) - y(i)) / B;
    }
    const double sq = W1().squaredNorm() + w2().squaredNorm();
    loss = loss / B + 0.5 * alpha * sq / B;

    Eigen::Map<Matrix> dW1(grad.data(), hidden, in);
    Eigen::Map<Vector> db1(grad.data() + hidden * in, hidden);
    Eigen::Map<Vector> dw2(grad.data() + hidden * in + hidden, hidden);
    dw2.noalias() = A * delta + (alpha / B) * w2();
    grad(grad.size() - 1) = delta.sum();
    Matrix dZ = w2() * delta.transpose();
    dZ.array() *= (Z.array() > 0.0).cast<double>();
    dW1.noalias() = dZ * X.transpose() + (alpha / B) * W1();
    db1 = dZ.rowwise().sum();
    return loss;
  }
};

struct TrainOutcome {
  Mlp net;
  int epochs = 0;
};

TrainOutcome train_mlp(const Matrix& X, const Vector& y, double alpha,
                       const NeuralOptions& opt, int max_epochs, Rng& rng) {
  TrainOutcome out{Mlp(static_cast<int>(X.rows()), opt.hidden), 0};
  Mlp& net = out.net;
  net.initialize(rng);
  const Eigen::Index n = X.cols();
  const Eigen::Index batch = std::min<Eigen::Index>(opt.batch_size, n);
  Vector m = Vector::Zero(net.theta.size()), v = m, grad = m;
  const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  long t = 0;
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  double best = std::numeric_limits<double>::infinity();
  int no_improve = 0;
  Matrix Xb;
  Vector yb;
  for (int epoch = 0; epoch < max_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0.0;
    for (Eigen::Index start = 0; start < n; start += batch) {
      const Eigen::Index len = std::min(batch, n - start);
      Xb.resize(X.rows(), len);
      yb.resize(len);
      for (Eigen::Index i = 0; i < len; ++i) {
        Xb.col(i) = X.col(order[start + i]);
        yb(i) = y(order[start + i]);
      }
      total += net.loss_and_grad(Xb, yb, alpha, grad) * static_cast<double>(len);
      ++t;
      m = b1 * m + (1.0 - b1) * grad;
      v = b2 * v + (1.0 - b2) * grad.cwiseAbs2();
      const double step = opt.learning_rate * std::sqrt(1.0 - std::pow(b2, t)) /
                          (1.0 - std::pow(b1, t));
      net.theta.array() -= step * m.array() / (v.array().sqrt() + eps);
    }
    out.epochs = epoch + 1;
    const double loss = total / static_cast<double>(n);
    if (!std::isfinite(loss)) throw NumericalError("classifier loss diverged");
    if (loss > best - opt.tolerance) {
      if (++no_improve >= opt.patience) break;
    } else {
      no_improve = 0;
    }
    best = std::min(best, loss);
  }
  return out;
}

class NeuralClassifier final : public Classifier {
 public:
  NeuralClassifier(InputEncoder enc, Mlp net, double alpha, int epochs, double val_acc)
      : enc_(std::move(enc)), net_(std::move(net)), alpha_(alpha), epochs_(epochs),
        val_acc_(val_acc) {}

  ClassifierKind kind() const override { return ClassifierKind::neural; }

  std::map<std::string, double> hyperparameters() const override {
    return {{"weight_decay", alpha_},
            {"epochs", epochs_},
            {"validation_accuracy", val_acc_},
            {"hidden", net_.hidden}};
  }

  Vector predict(const Matrix& rows) const override {
    return net_.logits(enc_(rows)).unaryExpr([](double o) { return sigmoid(o); });
  }

 private:
  InputEncoder enc_;
  Mlp net_;
  double alpha_;
  int epochs_;
  double val_acc_;
};

}  // namespace

ClassifierHandle fit_knn(const LabeledSet& set, const KnnOptions& options) {
  check_nonempty(set);
  if (!(options.subsample > 0.0 && options.subsample <= 1.0)) {
    throw std::invalid_argument("KNN subsample fraction must be in (0, 1]");
  }
  std::vector<int> rows = set.train;
  if (options.subsample < 1.0) {
    Rng rng(options.seed);
    std::shuffle(rows.begin(), rows.end(), rng);
    const auto keep = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::floor(options.subsample * rows.size())));
    rows.resize(keep);
  }
  int k = options.k > 0 ? options.k
                        : static_cast<int>(std::floor(std::sqrt(static_cast<double>(set.test.size()))));
  k = std::clamp(k, 1, static_cast<int>(rows.size()));
  std::vector<int> labels;
  labels.reserve(rows.size());
  for (int r : rows) labels.push_back(set.labels[r]);
  return std::make_shared<KnnClassifier>(gather_rows(set.features, rows), std::move(labels), k,
                                         set.categorical());
}

std::vector<double> weight_decay_grid() {
  return {std::pow(10.0, -1.0), std::pow(10.0, -0.5), 1.0, std::pow(10.0, 0.5), 10.0};
}

int nn_epoch_cap(int n_test) {
  if (n_test < 1) throw std::invalid_argument("N_test must be >= 1");
  return std::max(1, 10000 * 200 / n_test);
}

ClassifierHandle fit_neural(const LabeledSet& set, const NeuralOptions& options) {
  check_nonempty(set);
  if (options.weight_decays.empty()) throw std::invalid_argument("empty weight-decay grid");
  if (!(options.validation_fraction > 0.0 && options.validation_fraction < 1.0)) {
    throw std::invalid_argument("validation fraction must be in (0, 1)");
  }
  if (set.train.size() < 2) throw std::invalid_argument("need at least 2 training rows");
  Rng rng(options.seed);
  std::vector<int> rows = set.train;
  std::shuffle(rows.begin(), rows.end(), rng);
  std::size_t n_val = static_cast<std::size_t>(
      std::ceil(options.validation_fraction * static_cast<double>(rows.size())));
  n_val = std::clamp<std::size_t>(n_val, 1, rows.size() - 1);
  const std::vector<int> val(rows.begin(), rows.begin() + n_val);
  const std::vector<int> fit_rows(rows.begin() + n_val, rows.end());

  const InputEncoder enc = InputEncoder::fit(set);
  const Matrix X = enc(gather_rows(set.features, fit_rows));
  const Matrix Xv = enc(gather_rows(set.features, val));
  Vector y(static_cast<Eigen::Index>(fit_rows.size()));
  for (std::size_t i = 0; i < fit_rows.size(); ++i) y(i) = set.labels[fit_rows[i]];
  std::vector<int> yv;
  for (int r : val) yv.push_back(set.labels[r]);

  const int max_epochs = options.max_epochs > 0
                             ? options.max_epochs
                             : nn_epoch_cap(static_cast<int>(set.test.size()));
  std::vector<TrainOutcome> fits;
  std::vector<double> val_acc;
  for (double alpha : options.weight_decays) {
    if (!(alpha >= 0.0)) throw std::invalid_argument("weight decay must be >= 0");
    fits.push_back(train_mlp(X, y, alpha, options, max_epochs, rng));
    const Vector p = fits.back().net.logits(Xv).unaryExpr([](double o) { return sigmoid(o); });
    val_acc.push_back(accuracy(p, yv));
  }
  const double best = *std::max_element(val_acc.begin(), val_acc.end());
  std::size_t pick = 0;
  double pick_alpha = -1.0;
  for (std::size_t c = 0; c < fits.size(); ++c) {
    if (val_acc[c] >= best - options.selection_slack && options.weight_decays[c] > pick_alpha) {
      pick = c;
      pick_alpha = options.weight_decays[c];
    }
  }
  return std::make_shared<NeuralClassifier>(enc, std::move(fits[pick].net), pick_alpha,
                                            fits[pick].epochs, val_acc[pick]);
}

Vector knn_fit_predict(const LabeledSet& set, const KnnOptions& options) {
  return fit_knn(set, options)->predict(gather_rows(set.features, set.test));
}

Vector nn_fit_predict(const LabeledSet& set, const NeuralOptions& options) {
  return fit_neural(set, options)->predict(gather_rows(set.features, set.test));
}

}  // namespace cifa
