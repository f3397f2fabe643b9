#pragma once

#include <cstdint>
#include <vector>

#include "xbnn/dataset.hpp"
#include "xbnn/network.hpp"

namespace xbnn {

struct TrainHyper {
  double lr = 0.05;
  int epochs = 20;
  int batch = 32;
  bool adversarial = false;   // mix 50/50 clean / on-the-fly adversaries per batch
  double adv_epsilon = 0.1;
  std::uint64_t seed = 1;     // shuffle + adversary stream
};

struct TrainReport {
  std::vector<double> epoch_loss;  // mean per-sample loss per epoch
  double train_accuracy = 0.0;     // eval-mode accuracy on the training set
};

// Mean softmax cross-entropy over the batch; optional dL/dlogits (already
// divided by the batch size).
double softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels,
                             Tensor* dlogits);

// Argmax per row; ties resolve to the lowest class index. Logits within a
// 1e-9 relative band of the row maximum count as tied, so an analog readout
// that reproduces integer-valued logits up to solver epsilon predicts
// identically to the exact software forward.
std::vector<int> predict(const Tensor& logits);

// Plain SGD on the shadow weights with per-step binarization; shadow weights
// are clipped to [-1,1] after each update so the straight-through estimator
// keeps a live gradient region. Deterministic under (hyper.seed).
TrainReport train(NetworkModel& model, const Dataset& data, const TrainHyper& hyper);

double evaluate_accuracy(const NetworkModel& model, const Tensor& images,
                         const std::vector<int>& labels, int batch = 64);
double evaluate_accuracy(const MappedNetwork& mapped, const Tensor& images,
                         const std::vector<int>& labels, int batch = 64);

}  // namespace xbnn
