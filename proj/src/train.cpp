#include "xbnn/train.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>

#include "xbnn/attacks.hpp"
#include "xbnn/errors.hpp"
#include "xbnn/rng.hpp"

namespace xbnn {

double softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels,
                             Tensor* dlogits) {
  if (logits.rank() != 2) throw DataError("logits must be (N, classes)");
  const int N = logits.dim(0);
  const int C = logits.dim(1);
  if (static_cast<int>(labels.size()) != N)
    throw DataError("label count does not match the batch");
  if (dlogits) *dlogits = Tensor(logits.shape());

  double loss = 0.0;
  for (int n = 0; n < N; ++n) {
    const int y = labels[static_cast<std::size_t>(n)];
    if (y < 0 || y >= C) throw DataError("label " + std::to_string(y) + " out of range");
    double maxv = logits.at(n, 0);
    for (int c = 1; c < C; ++c) maxv = std::max(maxv, logits.at(n, c));
    double sum = 0.0;
    for (int c = 0; c < C; ++c) sum += std::exp(logits.at(n, c) - maxv);
    const double logsum = maxv + std::log(sum);
    loss += logsum - logits.at(n, y);
    if (dlogits) {
      for (int c = 0; c < C; ++c) {
        const double p = std::exp(logits.at(n, c) - logsum);
        dlogits->at(n, c) = (p - (c == y ? 1.0 : 0.0)) / static_cast<double>(N);
      }
    }
  }
  return loss / static_cast<double>(N);
}

std::vector<int> predict(const Tensor& logits) {
  if (logits.rank() != 2) throw DataError("logits must be (N, classes)");
  std::vector<int> out(static_cast<std::size_t>(logits.dim(0)));
  for (int n = 0; n < logits.dim(0); ++n) {
    double top = logits.at(n, 0);
    for (int c = 1; c < logits.dim(1); ++c) top = std::max(top, logits.at(n, c));
    const double band = 1e-9 * std::max(1.0, std::abs(top));
    int best = 0;
    while (logits.at(n, best) < top - band) ++best;
    out[static_cast<std::size_t>(n)] = best;
  }
  return out;
}

namespace {

Tensor slice_batch(const Tensor& images, const std::vector<int>& order, int begin, int end) {
  std::vector<int> shape = images.shape();
  shape[0] = end - begin;
  Tensor out(shape);
  const std::size_t stride = images.size() / static_cast<std::size_t>(images.dim(0));
  for (int k = begin; k < end; ++k)
    std::copy(images.data() + static_cast<std::size_t>(order[static_cast<std::size_t>(k)]) * stride,
              images.data() + (static_cast<std::size_t>(order[static_cast<std::size_t>(k)]) + 1) * stride,
              out.data() + static_cast<std::size_t>(k - begin) * stride);
  return out;
}

template <typename Model>
double accuracy_impl(const Model& model, const Tensor& images, const std::vector<int>& labels,
                     int batch, const std::function<ForwardTrace(const Tensor&)>& fwd) {
  const int N = images.dim(0);
  if (static_cast<int>(labels.size()) != N)
    throw DataError("label count does not match the batch");
  (void)model;
  int correct = 0;
  const std::size_t stride = images.size() / static_cast<std::size_t>(N);
  for (int b = 0; b < N; b += batch) {
    const int e = std::min(N, b + batch);
    std::vector<int> shape = images.shape();
    shape[0] = e - b;
    Tensor x(shape);
    std::copy(images.data() + static_cast<std::size_t>(b) * stride,
              images.data() + static_cast<std::size_t>(e) * stride, x.data());
    const std::vector<int> pred = predict(fwd(x).logits());
    for (int n = b; n < e; ++n)
      if (pred[static_cast<std::size_t>(n - b)] == labels[static_cast<std::size_t>(n)])
        ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(N);
}

}  // namespace

double evaluate_accuracy(const NetworkModel& model, const Tensor& images,
                         const std::vector<int>& labels, int batch) {
  return accuracy_impl(model, images, labels, batch,
                       [&](const Tensor& x) { return forward_ideal(model, x, false); });
}

double evaluate_accuracy(const MappedNetwork& mapped, const Tensor& images,
                         const std::vector<int>& labels, int batch) {
  return accuracy_impl(mapped, images, labels, batch,
                       [&](const Tensor& x) { return forward_crossbar(mapped, x); });
}

TrainReport train(NetworkModel& model, const Dataset& data, const TrainHyper& hyper) {
  if (data.size() == 0) throw DataError("training dataset is empty");
  if (hyper.lr <= 0.0) throw ConfigError("learning rate must be positive");
  if (hyper.batch <= 0) throw ConfigError("batch size must be positive");
  if (hyper.epochs < 0) throw ConfigError("epoch count must be nonnegative");
  if (data.num_classes != model.num_classes)
    throw ConfigError("dataset class count does not match the model");

  const int N = data.size();
  TrainReport report;
  std::vector<int> order(static_cast<std::size_t>(N));
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 0; epoch < hyper.epochs; ++epoch) {
    RandomStream shuffle(hyper.seed, stream_tag("shuffle"), static_cast<std::uint64_t>(epoch));
    for (int i = N - 1; i > 0; --i)
      std::swap(order[static_cast<std::size_t>(i)],
                order[shuffle.next_below(static_cast<std::uint64_t>(i + 1))]);

    double loss_sum = 0.0;
    for (int b = 0; b < N; b += hyper.batch) {
      const int e = std::min(N, b + hyper.batch);
      Tensor x = slice_batch(data.images, order, b, e);
      std::vector<int> y(static_cast<std::size_t>(e - b));
      for (int k = b; k < e; ++k)
        y[static_cast<std::size_t>(k - b)] =
            data.labels[static_cast<std::size_t>(order[static_cast<std::size_t>(k)])];

      if (hyper.adversarial && hyper.adv_epsilon > 0.0) {
        // Second half of each batch becomes FGSM adversaries against the
        // current weights, so every step sees a 50/50 clean/attacked mix.
        const int count = e - b;
        const int adv_from = count / 2;
        if (adv_from < count) {
          std::vector<int> shape = x.shape();
          shape[0] = count - adv_from;
          Tensor xa(shape);
          const std::size_t stride = x.size() / static_cast<std::size_t>(count);
          std::copy(x.data() + static_cast<std::size_t>(adv_from) * stride,
                    x.data() + static_cast<std::size_t>(count) * stride, xa.data());
          std::vector<int> ya(y.begin() + adv_from, y.end());
          AttackSpec spec;
          spec.kind = AttackKind::Fgsm;
          spec.epsilon = hyper.adv_epsilon;
          spec.seed = hyper.seed;
          Tensor adv = fgsm(model, xa, ya, spec);
          std::copy(adv.data(), adv.data() + adv.size(),
                    x.data() + static_cast<std::size_t>(adv_from) * stride);
        }
      }

      ForwardTrace trace = forward_ideal(model, x, /*training=*/true);
      Tensor dlogits;
      const double loss = softmax_cross_entropy(trace.logits(), y, &dlogits);
      if (!std::isfinite(loss)) throw NumericError("training diverged: non-finite loss");
      loss_sum += loss * static_cast<double>(e - b);

      Gradients g = backward(model, trace, dlogits);
      for (std::size_t l = 0; l < model.layers.size(); ++l) {
        Layer& layer = model.layers[l];
        if (layer.weighted()) {
          const Tensor& dw = g.weight_grads[l];
          for (std::size_t i = 0; i < layer.shadow.size(); ++i)
            layer.shadow[i] =
                std::clamp(layer.shadow[i] - hyper.lr * dw[i], -1.0, 1.0);
        } else if (layer.kind == LayerKind::BatchNorm) {
          for (int c = 0; c < layer.channels; ++c) {
            layer.gamma[static_cast<std::size_t>(c)] -=
                hyper.lr * g.gamma_grads[l][static_cast<std::size_t>(c)];
            layer.beta[static_cast<std::size_t>(c)] -=
                hyper.lr * g.beta_grads[l][static_cast<std::size_t>(c)];
          }
        }
      }
    }
    report.epoch_loss.push_back(loss_sum / static_cast<double>(N));
  }

  report.train_accuracy = evaluate_accuracy(model, data.images, data.labels);
  return report;
}

}  // namespace xbnn
