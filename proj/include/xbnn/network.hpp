#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "xbnn/circuit.hpp"
#include "xbnn/mapping.hpp"
#include "xbnn/tensor.hpp"

namespace xbnn {

enum class LayerKind { BinConv, BinDense, Sign, MaxPool, BatchNorm, Flatten };
enum class Backend { Ideal, Crossbar };

std::string to_string(LayerKind k);

// One layer of the model. Weighted layers (BinConv/BinDense) keep real
// shadow weights for training and are binarized at every forward pass.
struct Layer {
  LayerKind kind = LayerKind::Sign;

  // BinConv
  int out_ch = 0, in_ch = 0, kh = 0, kw = 0, stride = 1, pad = 0;
  // BinDense
  int in_features = 0, out_features = 0;
  Tensor shadow;  // conv: (out,in,kh,kw); dense: (out,in)
  Backend backend = Backend::Ideal;

  // BatchNorm
  int channels = 0;
  std::vector<double> gamma, beta, run_mean, run_var;

  // MaxPool (kernel == stride)
  int pool = 2;

  bool weighted() const { return kind == LayerKind::BinConv || kind == LayerKind::BinDense; }
};

struct NetworkModel {
  std::vector<Layer> layers;
  BinarizationPolicy policy;
  int in_c = 1, in_h = 16, in_w = 16;
  bool input_binary = false;  // inputs are +-1, so layer 0 may be crossbar-backed
  int num_classes = 0;
  std::uint64_t seed = 0;
  std::string arch;  // source string, kept for checkpoints
};

// Builds a model from an architecture string, e.g.
//   "conv(8,3,1,1);bn;sign;pool(2);conv(16,3,1,1);bn;sign;pool(2);flatten;dense(64);bn;sign;dense(10)"
// conv(out,k[,stride[,pad]]), dense(out), bn, sign, pool(k), flatten.
// Shapes are validated; weights are seeded deterministically.
NetworkModel model_from_arch(const std::string& arch, int in_c, int in_h, int in_w,
                             const BinarizationPolicy& policy, std::uint64_t seed,
                             bool input_binary = false);

// Backend plan: "auto" = every weighted layer except the first runs on the
// crossbar; "all"; "none"; or a comma list of weighted-layer ordinals.
// Throws if a crossbar-backed layer would not see +-1 inputs.
void apply_backend_plan(NetworkModel& model, const std::string& plan);

// Per-batch batch-norm statistics, cached for backward.
struct BnCache {
  std::vector<double> mean, var, inv_std;
};

struct ForwardTrace {
  std::vector<Tensor> inputs;    // input of each layer
  std::vector<Tensor> outputs;   // output of each layer; back() == logits
  std::vector<Tensor> binw;      // binarized weights per weighted layer
  std::vector<BnCache> bn;       // per-layer cache (training mode)
  std::vector<std::vector<std::int64_t>> pool_argmax;  // flat indices into the layer input
  bool training = false;

  const Tensor& logits() const { return outputs.back(); }
};

// A crossbar-backed weighted layer: its tiles plus the assembled effective
// weight matrix (decode-scaled), which reproduces the tile-by-tile
// solve/decode pipeline exactly and is what HH-mode gradients flow through.
struct MappedLayer {
  int layer_index = 0;
  int u_rows = 0, u_cols = 0;
  int block_rows = 0, block_cols = 0;
  std::vector<CrossbarInstance> tiles;  // row-major block order
  Eigen::MatrixXd w_eff;
};

struct MappedNetwork {
  NetworkModel model;
  MapMode mode = MapMode::Normal;
  DeviceConfig cfg;
  std::vector<MappedLayer> layers;

  const MappedLayer* find_layer(int layer_index) const;
};

// Binarizes, unrolls, tiles, maps and extracts every crossbar-backed layer.
// Tile extraction is deterministic per tile and may fan out over `threads`.
MappedNetwork map_network(const NetworkModel& model, const DeviceConfig& cfg, MapMode mode,
                          int threads = 1);

// Software forward pass (binarized weights, exact arithmetic).
ForwardTrace forward_ideal(const NetworkModel& model, const Tensor& x, bool training = false);

// Hardware forward pass: crossbar layers run current-domain MVMs through
// g_equiv followed by reference subtraction and SEL decode, accumulated
// across block-rows; everything else runs in software.
ForwardTrace forward_crossbar(const MappedNetwork& mapped, const Tensor& x);

struct Gradients {
  Tensor input_grad;
  std::vector<Tensor> weight_grads;             // aligned with layers; empty when absent
  std::vector<std::vector<double>> gamma_grads;  // aligned with layers
  std::vector<std::vector<double>> beta_grads;
};

// Reverse pass from dL/dlogits. Sign layers use the straight-through
// estimator 1{|x| <= 1}; weighted layers propagate through the binarized
// (or effective, for mapped layers) weights, and weight gradients flow
// straight through to the shadow weights.
Gradients backward(const NetworkModel& model, const ForwardTrace& trace, const Tensor& dlogits);
Gradients backward(const MappedNetwork& mapped, const ForwardTrace& trace, const Tensor& dlogits);

// Checkpoint container: magic + version + self-describing JSON header +
// little-endian f64 tensor payload. Layout documented in docs/formats.md.
void save_checkpoint(const NetworkModel& model, const std::string& path);
NetworkModel load_checkpoint(const std::string& path);

// im2col for one sample (C,H,W view into a batch tensor): rows = output
// positions, cols = in_c*kh*kw, zero-filled outside the padded input.
Eigen::MatrixXd im2col(const double* x, int c, int h, int w, int kh, int kw, int stride, int pad);

int conv_out_dim(int in, int k, int stride, int pad);

}  // namespace xbnn
