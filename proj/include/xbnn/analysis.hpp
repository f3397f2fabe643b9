#pragma once

#include <vector>

#include "xbnn/attacks.hpp"
#include "xbnn/circuit.hpp"
#include "xbnn/network.hpp"

namespace xbnn {

// Per-layer crossbar power, averaged per input sample: every tile MVM of the
// layer contributes its instantaneous driver power and the per-sample totals
// are averaged over the measured samples.
struct LayerPowerStats {
  int layer_index = 0;
  int tiles = 0;
  double mvm_ops = 0.0;  // tile MVMs per sample
  double ideal_w = 0.0;
  double ideal_weights_only_w = 0.0;  // reference column excluded
  double nonideal_w = 0.0;
};

// Runs the mapped forward pass on (at most) max_samples inputs and meters
// every crossbar layer with full nodal solves of the varied tiles.
std::vector<LayerPowerStats> measure_power(const MappedNetwork& mapped, const Tensor& images,
                                           int max_samples);

// Aggregate NF of one tile under the uniform read pattern (+v_read on every
// row that carries at least one real weight).
struct TileNfSample {
  int layer_index = 0;
  int block_row = 0;
  int block_col = 0;
  double aggregate = 0.0;
};

std::vector<TileNfSample> measure_nf(const MappedNetwork& mapped,
                                     NfIdealRef ref = NfIdealRef::Nominal);

// Generates adversaries per spec (SH: software gradients; HH: mapped
// gradients), evaluates clean and adversarial batches on the mapped network
// when one is given (otherwise on the software model), and reports ANS over
// the evaluation traces.
struct AttackEval {
  std::vector<AttackRecord> records;
  double clean_accuracy = 0.0;
  double adv_accuracy = 0.0;
  AnsReport ans;
};

AttackEval run_attack(const NetworkModel& software, const MappedNetwork* mapped,
                      const Tensor& images, const std::vector<int>& labels,
                      const AttackSpec& spec);

}  // namespace xbnn
