#pragma once

#include <Eigen/Dense>
#include <string>
#include <vector>

#include "xbnn/device.hpp"
#include "xbnn/tensor.hpp"

namespace xbnn {

using BoolMatrix = Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic>;

enum class MapMode { Normal, SwitchX };
enum class WeightLayout { Conv, Dense };

std::string to_string(MapMode m);
MapMode map_mode_from_string(const std::string& s);

// One crossbar-sized block of binary weights. Entries are +-1; mask marks
// real weights (false = zero padding, stored as -1 and driven at 0 V).
struct WeightTile {
  Eigen::MatrixXi entries;
  BoolMatrix mask;
  TileKey origin;

  // Mean over unmasked entries; 0 for an all-padding tile.
  double unmasked_mean() const;
};

// Conductance image of a WeightTile. Column `cols` (the last one) is the
// reference column at g_ref; weight cells hold g_min or g_max.
struct MappedTile {
  Eigen::MatrixXd g;  // rows x (cols + 1)
  bool sel = false;   // true = switched mapping, decode negates
  BoolMatrix mask;
  ConductanceLevels levels;
  TileKey origin;

  int weight_cols() const { return static_cast<int>(g.cols()) - 1; }
  int ref_col() const { return static_cast<int>(g.cols()) - 1; }
};

struct BinarizationPolicy {
  enum class Mode { Standard, StateAware };
  Mode mode = Mode::Standard;
  double delta_mag = 0.0;  // |delta|, 0 in standard mode
};

std::string to_string(BinarizationPolicy::Mode m);
BinarizationPolicy::Mode policy_mode_from_string(const std::string& s);

// Binarizes a real weight tensor to {-1,+1}. Standard: +1 where w > 0.
// State-aware: per channel c (index along channel_axis), the threshold is
// +delta_mag when negatives are the channel majority and -delta_mag
// otherwise; +1 where w > threshold. Either way the channel majority is
// amplified, which raises the HRS share after switched mapping.
Tensor binarize(const Tensor& real_weights, const BinarizationPolicy& policy,
                int channel_axis = 0);

// Lowers layer weights to the crossbar orientation: rows = input dimension,
// cols = output dimension. Conv weights (out,in,kh,kw) become a
// (in*kh*kw) x out matrix matching the activation-side im2col; dense weights
// (out,in) become in x out.
Eigen::MatrixXd unroll_matrix(const Tensor& weights, WeightLayout layout);

struct TiledLayer {
  int u_rows = 0;  // unrolled (pre-padding) dimensions
  int u_cols = 0;
  int block_rows = 0;
  int block_cols = 0;
  std::vector<WeightTile> tiles;  // row-major block order
};

// Zero-pads a +-1 matrix up to multiples of (cfg.rows, cfg.cols) and cuts it
// into crossbar-sized blocks. Entries must be exactly +-1.
TiledLayer tile_matrix(const Eigen::MatrixXd& unrolled, const DeviceConfig& cfg, int layer_id);

// unroll_matrix + tile_matrix. Weights must already be binary.
TiledLayer unroll_and_tile(const Tensor& weights, WeightLayout layout, const DeviceConfig& cfg,
                           int layer_id);

// Weight-to-conductance mapping. Normal: +1 -> g_max, -1 -> g_min, sel=false.
// SwitchX: if the unmasked mean is > 0 the assignment is inverted and
// sel=true; on mean <= 0 it falls back to normal mapping. Masked cells map
// to g_min. The reference column is set to g_ref.
MappedTile map_tile(const WeightTile& tile, MapMode mode, const ConductanceLevels& levels);

// Inverse transformation at the column periphery: subtract the reference
// current, rescale, and negate when sel is set. On an ideal crossbar this
// recovers the integer MAC exactly.
double decode_mac(double column_current, double ref_current, const MappedTile& mapped,
                  const DeviceConfig& cfg);

// JSON layout for --dump: entries row-major, mask run-length encoded
// (alternating counts, first run counts `true`), sel, origin, levels.
std::string tile_to_json(const WeightTile& tile);
std::string mapped_tile_to_json(const MappedTile& tile);
WeightTile tile_from_json(const std::string& json);
MappedTile mapped_tile_from_json(const std::string& json);

std::vector<int> mask_rle(const BoolMatrix& mask);
BoolMatrix mask_from_rle(const std::vector<int>& runs, int rows, int cols);

}  // namespace xbnn
