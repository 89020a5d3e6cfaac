#include <cmath>
#include <numeric>

#include "megatron/errors.hpp"
#include "megatron/random.hpp"
#include "megatron/vit.hpp"

namespace megatron::vit {
namespace {

constexpr double kAdamBeta1 = 0.9;
constexpr double kAdamBeta2 = 0.999;
constexpr double kAdamEps = 1e-8;

// Softmax cross-entropy over each logits row. Writes the mean-loss gradient
// into `d_logits` and returns the summed loss and correct count.
std::pair<double, int> cross_entropy(const Matrix& logits, std::span<const int> labels,
                                     Matrix& d_logits) {
  const Eigen::Index B = logits.rows();
  d_logits.resize(B, logits.cols());
  double loss = 0.0;
  int correct = 0;
  for (Eigen::Index b = 0; b < B; ++b) {
    const double mx = logits.row(b).maxCoeff();
    Eigen::RowVectorXd e = (logits.row(b).array() - mx).exp();
    const double z = e.sum();
    const int y = labels[b];
    loss += std::log(z) - (logits(b, y) - mx);
    d_logits.row(b) = e / z;
    d_logits(b, y) -= 1.0;
    Eigen::Index arg = 0;
    logits.row(b).maxCoeff(&arg);
    if (arg == y) ++correct;
  }
  d_logits /= static_cast<double>(B);
  return {loss, correct};
}

class AdamState {
 public:
  explicit AdamState(const Params& like) : m_(zeros_like(like)), v_(zeros_like(like)) {}

  void step(Params& p, const Params& g, double lr, double wd) {
    ++t_;
    const double bc1 = 1.0 - std::pow(kAdamBeta1, t_);
    const double bc2 = 1.0 - std::pow(kAdamBeta2, t_);
    std::vector<Matrix*> ms, vs;
    for_each_tensor(m_, [&](const std::string&, Matrix& m) { ms.push_back(&m); });
    for_each_tensor(v_, [&](const std::string&, Matrix& m) { vs.push_back(&m); });
    std::size_t i = 0;
    for_each_tensor_pair(p, g, [&](const std::string&, Matrix& w, const Matrix& dw) {
      Matrix& m = *ms[i];
      Matrix& v = *vs[i];
      ++i;
      m = kAdamBeta1 * m + (1.0 - kAdamBeta1) * dw;
      v = kAdamBeta2 * v + (1.0 - kAdamBeta2) * dw.cwiseProduct(dw);
      if (wd > 0.0) w *= (1.0 - lr * wd);
      w.array() -= lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + kAdamEps);
    });
  }

 private:
  Params m_, v_;
  int t_ = 0;
};

}  // namespace

void TrainConfig::validate() const {
  if (epochs < 1) throw InputError("TrainConfig: epochs must be >= 1");
  if (!(learning_rate > 0.0)) throw InputError("TrainConfig: learning_rate must be > 0");
  if (batch_size < 1) throw InputError("TrainConfig: batch_size must be >= 1");
  if (weight_decay < 0.0) throw InputError("TrainConfig: weight_decay must be >= 0");
}

TrainResult train(const ModelConfig& config, const TrainConfig& tc, const Dataset& dataset,
                  const EpochObserver& observer) {
  config.validate();
  tc.validate();
  if (dataset.empty()) throw InputError("train: empty dataset");
  for (const auto& s : dataset) {
    if (s.label < 0 || s.label >= config.n_classes) {
      throw InputError("train: label " + std::to_string(s.label) + " of sample '" + s.id +
                       "' outside [0, n_classes)");
    }
  }

  Model model{config, init_params(config, tc.seed)};
  AdamState adam(model.params);
  Rng rng(derive_seed(tc.seed, 0x7261696e));  // batch-order stream

  std::vector<std::size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<const Image*> batch_images;
  std::vector<int> batch_labels;
  TrainResult result;

  for (int epoch = 0; epoch < tc.epochs; ++epoch) {
    rng.shuffle(order);
    double loss_sum = 0.0;
    int correct = 0;
    for (std::size_t start = 0; start < order.size(); start += tc.batch_size) {
      const std::size_t len = std::min<std::size_t>(tc.batch_size, order.size() - start);
      batch_images.clear();
      batch_labels.clear();
      for (std::size_t i = 0; i < len; ++i) {
        batch_images.push_back(&dataset[order[start + i]].pixels);
        batch_labels.push_back(dataset[order[start + i]].label);
      }
      const ForwardCache cache = forward_batch(model, batch_images);
      Upstream up;
      const auto [loss, hits] = cross_entropy(cache.logits, batch_labels, up.d_logits);
      loss_sum += loss;
      correct += hits;
      Gradients g = backward(model, cache, up, {.params = true});
      if (tc.optimizer == Optimizer::Adam) {
        adam.step(model.params, *g.params, tc.learning_rate, tc.weight_decay);
      } else {
        for_each_tensor_pair(model.params, *g.params,
                             [&](const std::string&, Matrix& w, const Matrix& dw) {
                               if (tc.weight_decay > 0.0) w *= (1.0 - tc.learning_rate * tc.weight_decay);
                               w -= tc.learning_rate * dw;
                             });
      }
    }
    EpochStats stats{epoch + 1, loss_sum / static_cast<double>(dataset.size()),
                     static_cast<double>(correct) / static_cast<double>(dataset.size())};
    result.history.push_back(stats);
    if (observer) observer(stats);
  }
  result.final_loss = result.history.back().mean_loss;
  result.params = std::move(model.params);
  return result;
}

EvalStats evaluate(const Model& model, const Dataset& dataset, int batch_size) {
  if (dataset.empty()) throw InputError("evaluate: empty dataset");
  double loss = 0.0;
  int correct = 0;
  std::vector<const Image*> imgs;
  std::vector<int> labels;
  Matrix d;
  for (std::size_t start = 0; start < dataset.size(); start += batch_size) {
    const std::size_t len = std::min<std::size_t>(batch_size, dataset.size() - start);
    imgs.clear();
    labels.clear();
    for (std::size_t i = 0; i < len; ++i) {
      imgs.push_back(&dataset[start + i].pixels);
      labels.push_back(dataset[start + i].label);
    }
    const ForwardCache c = forward_batch(model, imgs);
    const auto [l, hits] = cross_entropy(c.logits, labels, d);
    loss += l;
    correct += hits;
  }
  return {loss / dataset.size(), static_cast<double>(correct) / dataset.size()};
}

}  // namespace megatron::vit
