#include "xbnn/device.hpp"

#include <string>

#include "xbnn/errors.hpp"
#include "xbnn/rng.hpp"

namespace xbnn {

void DeviceConfig::validate() const {
  if (rows <= 0 || cols <= 0) throw ConfigError("device: rows/cols must be positive");
  if (r_min <= 0.0) throw ConfigError("device: r_min must be > 0");
  if (on_off_ratio <= 1.0)
    throw ConfigError("device: on_off_ratio must be > 1 (decode needs g_max > g_min)");
  if (r_driver < 0.0 || r_wire_row < 0.0 || r_wire_col < 0.0 || r_sense < 0.0)
    throw ConfigError("device: parasitic resistances must be >= 0");
  if (sigma_over_mu < 0.0 || sigma_over_mu > 0.5)
    throw ConfigError("device: sigma_over_mu must be in [0, 0.5]");
  if (v_read <= 0.0) throw ConfigError("device: v_read must be > 0");
}

ConductanceLevels levels_from_config(const DeviceConfig& cfg) {
  if (cfg.r_min <= 0.0) throw ConfigError("levels: r_min must be > 0");
  if (cfg.on_off_ratio < 1.0) throw ConfigError("levels: on_off_ratio must be >= 1");
  ConductanceLevels lv;
  lv.g_max = 1.0 / cfg.r_min;
  lv.g_min = 1.0 / (cfg.r_min * cfg.on_off_ratio);
  lv.g_ref = 0.5 * (lv.g_max + lv.g_min);
  return lv;
}

Eigen::MatrixXd sample_variation(const Eigen::MatrixXd& nominal, const DeviceConfig& cfg,
                                 const TileKey& key) {
  if ((nominal.array() <= 0.0).any())
    throw NumericError("sample_variation: nominal conductances must be > 0");

  Eigen::MatrixXd out = nominal;
  if (cfg.sigma_over_mu == 0.0) return out;

  RandomStream rs(cfg.seed, stream_tag("variation"), key.layer, key.block_row, key.block_col);
  for (Eigen::Index i = 0; i < nominal.rows(); ++i) {
    for (Eigen::Index j = 0; j < nominal.cols(); ++j) {
      const double mu = nominal(i, j);
      const double draw = mu + cfg.sigma_over_mu * mu * rs.next_gaussian();
      out(i, j) = std::max(draw, mu / 100.0);
    }
  }
  return out;
}

}  // namespace xbnn
