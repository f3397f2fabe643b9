#include "xbnn/mapping.hpp"

#include <cmath>

#include <nlohmann/json.hpp>

#include "xbnn/errors.hpp"

namespace xbnn {

using nlohmann::json;

std::string to_string(MapMode m) { return m == MapMode::Normal ? "normal" : "switchx"; }

MapMode map_mode_from_string(const std::string& s) {
  if (s == "normal") return MapMode::Normal;
  if (s == "switchx") return MapMode::SwitchX;
  throw ConfigError("unknown mapping mode '" + s + "' (expected normal|switchx)");
}

std::string to_string(BinarizationPolicy::Mode m) {
  return m == BinarizationPolicy::Mode::Standard ? "standard" : "state-aware";
}

BinarizationPolicy::Mode policy_mode_from_string(const std::string& s) {
  if (s == "standard") return BinarizationPolicy::Mode::Standard;
  if (s == "state-aware") return BinarizationPolicy::Mode::StateAware;
  throw ConfigError("unknown binarization mode '" + s + "' (expected standard|state-aware)");
}

double WeightTile::unmasked_mean() const {
  long sum = 0;
  long n = 0;
  for (Eigen::Index i = 0; i < entries.rows(); ++i)
    for (Eigen::Index j = 0; j < entries.cols(); ++j)
      if (mask(i, j)) {
        sum += entries(i, j);
        ++n;
      }
  return n == 0 ? 0.0 : static_cast<double>(sum) / static_cast<double>(n);
}

Tensor binarize(const Tensor& real_weights, const BinarizationPolicy& policy, int channel_axis) {
  for (std::size_t i = 0; i < real_weights.size(); ++i)
    if (!std::isfinite(real_weights[i]))
      throw NumericError("binarize: weights must be finite");

  Tensor out(real_weights.shape());
  const int channels = real_weights.dim(channel_axis);

  // Stride arithmetic for iterating one channel slice.
  std::size_t inner = 1;
  for (int a = channel_axis + 1; a < real_weights.rank(); ++a)
    inner *= static_cast<std::size_t>(real_weights.dim(a));
  std::size_t outer = 1;
  for (int a = 0; a < channel_axis; ++a) outer *= static_cast<std::size_t>(real_weights.dim(a));

  for (int c = 0; c < channels; ++c) {
    double threshold = 0.0;
    if (policy.mode == BinarizationPolicy::Mode::StateAware) {
      long neg = 0, nonneg = 0;
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t k = 0; k < inner; ++k) {
          const double w = real_weights[(o * channels + c) * inner + k];
          (w < 0.0 ? neg : nonneg) += 1;
        }
      threshold = neg > nonneg ? policy.delta_mag : -policy.delta_mag;
    }
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t k = 0; k < inner; ++k) {
        const std::size_t idx = (o * channels + c) * inner + k;
        out[idx] = real_weights[idx] > threshold ? 1.0 : -1.0;
      }
  }
  return out;
}

Eigen::MatrixXd unroll_matrix(const Tensor& weights, WeightLayout layout) {
  if (layout == WeightLayout::Dense) {
    if (weights.rank() != 2) throw DataError("unroll: dense weights must be rank 2 (out, in)");
    const int out = weights.dim(0), in = weights.dim(1);
    if (out == 0 || in == 0) throw DataError("unroll: zero-size dimension");
    Eigen::MatrixXd m(in, out);
    for (int o = 0; o < out; ++o)
      for (int i = 0; i < in; ++i) m(i, o) = weights.at(o, i);
    return m;
  }
  if (weights.rank() != 4)
    throw DataError("unroll: conv weights must be rank 4 (out, in, kh, kw)");
  const int out = weights.dim(0), in = weights.dim(1), kh = weights.dim(2), kw = weights.dim(3);
  if (out == 0 || in == 0 || kh == 0 || kw == 0) throw DataError("unroll: zero-size dimension");
  Eigen::MatrixXd m(in * kh * kw, out);
  for (int o = 0; o < out; ++o)
    for (int ci = 0; ci < in; ++ci)
      for (int ky = 0; ky < kh; ++ky)
        for (int kx = 0; kx < kw; ++kx) m((ci * kh + ky) * kw + kx, o) = weights.at(o, ci, ky, kx);
  return m;
}

TiledLayer tile_matrix(const Eigen::MatrixXd& unrolled, const DeviceConfig& cfg, int layer_id) {
  const int ur = static_cast<int>(unrolled.rows());
  const int uc = static_cast<int>(unrolled.cols());
  if (ur == 0 || uc == 0) throw DataError("tile: zero-size unrolled matrix");
  for (Eigen::Index i = 0; i < unrolled.rows(); ++i)
    for (Eigen::Index j = 0; j < unrolled.cols(); ++j)
      if (unrolled(i, j) != 1.0 && unrolled(i, j) != -1.0)
        throw DataError("tile: entries must be exactly +-1 (binarize first)");

  TiledLayer tl;
  tl.u_rows = ur;
  tl.u_cols = uc;
  tl.block_rows = (ur + cfg.rows - 1) / cfg.rows;
  tl.block_cols = (uc + cfg.cols - 1) / cfg.cols;
  tl.tiles.reserve(static_cast<std::size_t>(tl.block_rows) * tl.block_cols);

  for (int bi = 0; bi < tl.block_rows; ++bi) {
    for (int bj = 0; bj < tl.block_cols; ++bj) {
      WeightTile t;
      t.entries = Eigen::MatrixXi::Constant(cfg.rows, cfg.cols, -1);
      t.mask = BoolMatrix::Constant(cfg.rows, cfg.cols, false);
      t.origin = TileKey{layer_id, bi, bj};
      for (int r = 0; r < cfg.rows; ++r) {
        const int gr = bi * cfg.rows + r;
        if (gr >= ur) break;
        for (int c = 0; c < cfg.cols; ++c) {
          const int gc = bj * cfg.cols + c;
          if (gc >= uc) break;
          t.entries(r, c) = unrolled(gr, gc) > 0 ? 1 : -1;
          t.mask(r, c) = true;
        }
      }
      tl.tiles.push_back(std::move(t));
    }
  }
  return tl;
}

TiledLayer unroll_and_tile(const Tensor& weights, WeightLayout layout, const DeviceConfig& cfg,
                           int layer_id) {
  return tile_matrix(unroll_matrix(weights, layout), cfg, layer_id);
}

MappedTile map_tile(const WeightTile& tile, MapMode mode, const ConductanceLevels& levels) {
  const int rows = static_cast<int>(tile.entries.rows());
  const int cols = static_cast<int>(tile.entries.cols());

  MappedTile mt;
  mt.mask = tile.mask;
  mt.levels = levels;
  mt.origin = tile.origin;
  mt.sel = mode == MapMode::SwitchX && tile.unmasked_mean() > 0.0;
  mt.g.resize(rows, cols + 1);

  const double g_plus = mt.sel ? levels.g_min : levels.g_max;   // conductance of a +1 weight
  const double g_minus = mt.sel ? levels.g_max : levels.g_min;  // conductance of a -1 weight
  for (int i = 0; i < rows; ++i) {
    for (int j = 0; j < cols; ++j) {
      if (!tile.mask(i, j)) {
        mt.g(i, j) = levels.g_min;  // padding cell; its row is driven at 0 V
      } else {
        mt.g(i, j) = tile.entries(i, j) > 0 ? g_plus : g_minus;
      }
    }
    mt.g(i, cols) = levels.g_ref;
  }
  return mt;
}

double decode_mac(double column_current, double ref_current, const MappedTile& mapped,
                  const DeviceConfig& cfg) {
  const double half_span = 0.5 * (mapped.levels.g_max - mapped.levels.g_min);
  if (half_span == 0.0) throw NumericError("decode: g_max == g_min (on_off_ratio 1)");
  const double raw = (column_current - ref_current) / (cfg.v_read * half_span);
  return mapped.sel ? -raw : raw;
}

std::vector<int> mask_rle(const BoolMatrix& mask) {
  std::vector<int> runs;
  bool current = true;
  int count = 0;
  for (Eigen::Index i = 0; i < mask.rows(); ++i)
    for (Eigen::Index j = 0; j < mask.cols(); ++j) {
      if (mask(i, j) == current) {
        ++count;
      } else {
        runs.push_back(count);
        current = !current;
        count = 1;
      }
    }
  runs.push_back(count);
  return runs;
}

BoolMatrix mask_from_rle(const std::vector<int>& runs, int rows, int cols) {
  BoolMatrix mask(rows, cols);
  bool current = true;
  std::size_t run = 0;
  int remaining = runs.empty() ? 0 : runs[0];
  long total = 0;
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) {
      while (remaining == 0) {
        ++run;
        if (run >= runs.size()) throw DataError("mask rle: runs shorter than rows*cols");
        current = !current;
        remaining = runs[run];
      }
      mask(i, j) = current;
      --remaining;
      ++total;
    }
  if (remaining != 0 || run + 1 != runs.size())
    throw DataError("mask rle: runs longer than rows*cols");
  (void)total;
  return mask;
}

namespace {

json origin_to_json(const TileKey& k) { return json::array({k.layer, k.block_row, k.block_col}); }

TileKey origin_from_json(const json& j) {
  return TileKey{j.at(0).get<int>(), j.at(1).get<int>(), j.at(2).get<int>()};
}

}  // namespace

std::string tile_to_json(const WeightTile& tile) {
  json j;
  j["rows"] = tile.entries.rows();
  j["cols"] = tile.entries.cols();
  j["origin"] = origin_to_json(tile.origin);
  std::vector<int> entries;
  entries.reserve(static_cast<std::size_t>(tile.entries.size()));
  for (Eigen::Index i = 0; i < tile.entries.rows(); ++i)
    for (Eigen::Index jx = 0; jx < tile.entries.cols(); ++jx) entries.push_back(tile.entries(i, jx));
  j["entries"] = entries;
  j["mask_rle"] = mask_rle(tile.mask);
  return j.dump();
}

WeightTile tile_from_json(const std::string& text) {
  json j = json::parse(text);
  const int rows = j.at("rows").get<int>();
  const int cols = j.at("cols").get<int>();
  WeightTile t;
  t.origin = origin_from_json(j.at("origin"));
  t.entries.resize(rows, cols);
  const auto entries = j.at("entries").get<std::vector<int>>();
  if (static_cast<int>(entries.size()) != rows * cols)
    throw DataError("tile json: entries size mismatch");
  for (int i = 0; i < rows; ++i)
    for (int c = 0; c < cols; ++c) t.entries(i, c) = entries[static_cast<std::size_t>(i) * cols + c];
  t.mask = mask_from_rle(j.at("mask_rle").get<std::vector<int>>(), rows, cols);
  return t;
}

std::string mapped_tile_to_json(const MappedTile& tile) {
  json j;
  const int rows = static_cast<int>(tile.g.rows());
  const int cols = tile.weight_cols();
  j["rows"] = rows;
  j["cols"] = cols;
  j["origin"] = origin_to_json(tile.origin);
  j["sel"] = tile.sel;
  j["levels"] = {{"g_min", tile.levels.g_min}, {"g_max", tile.levels.g_max},
                 {"g_ref", tile.levels.g_ref}};
  // Weight cells as +-1 relative to normal mapping; together with sel and
  // levels this reconstructs the conductance matrix.
  std::vector<int> entries;
  entries.reserve(static_cast<std::size_t>(rows) * cols);
  const double g_plus = tile.sel ? tile.levels.g_min : tile.levels.g_max;
  for (int i = 0; i < rows; ++i)
    for (int c = 0; c < cols; ++c)
      entries.push_back(!tile.mask(i, c) ? -1 : (tile.g(i, c) == g_plus ? 1 : -1));
  j["entries"] = entries;
  j["mask_rle"] = mask_rle(tile.mask);
  return j.dump();
}

MappedTile mapped_tile_from_json(const std::string& text) {
  json j = json::parse(text);
  const int rows = j.at("rows").get<int>();
  const int cols = j.at("cols").get<int>();
  WeightTile t;
  t.origin = origin_from_json(j.at("origin"));
  t.entries.resize(rows, cols);
  const auto entries = j.at("entries").get<std::vector<int>>();
  if (static_cast<int>(entries.size()) != rows * cols)
    throw DataError("mapped tile json: entries size mismatch");
  for (int i = 0; i < rows; ++i)
    for (int c = 0; c < cols; ++c) t.entries(i, c) = entries[static_cast<std::size_t>(i) * cols + c];
  t.mask = mask_from_rle(j.at("mask_rle").get<std::vector<int>>(), rows, cols);

  ConductanceLevels lv;
  lv.g_min = j.at("levels").at("g_min").get<double>();
  lv.g_max = j.at("levels").at("g_max").get<double>();
  lv.g_ref = j.at("levels").at("g_ref").get<double>();

  const bool sel = j.at("sel").get<bool>();
  MappedTile mt;
  mt.mask = t.mask;
  mt.levels = lv;
  mt.origin = t.origin;
  mt.sel = sel;
  mt.g.resize(rows, cols + 1);
  const double g_plus = sel ? lv.g_min : lv.g_max;
  const double g_minus = sel ? lv.g_max : lv.g_min;
  for (int i = 0; i < rows; ++i) {
    for (int c = 0; c < cols; ++c)
      mt.g(i, c) = !t.mask(i, c) ? lv.g_min : (t.entries(i, c) > 0 ? g_plus : g_minus);
    mt.g(i, cols) = lv.g_ref;
  }
  return mt;
}

}  // namespace xbnn
