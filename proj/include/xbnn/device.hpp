#pragma once

#include <Eigen/Dense>
#include <cstdint>

namespace xbnn {

// Crossbar geometry, conductance range, parasitics and device variation.
// Resistances in ohms, conductances in siemens, voltages in volts. A zero
// parasitic resistance disables that parasitic (the nodes collapse).
struct DeviceConfig {
  int rows = 32;
  int cols = 32;
  double r_min = 20e3;        // LRS resistance
  double on_off_ratio = 10.0; // r_max / r_min
  double r_driver = 1e3;
  double r_wire_row = 5.0;
  double r_wire_col = 10.0;
  double r_sense = 1e3;
  double sigma_over_mu = 0.10;
  double v_read = 0.1;
  std::uint64_t seed = 1;
  // Whether the reference column is subject to device variation like any
  // other programmed cell.
  bool vary_reference = true;

  // Throws ConfigError on violation. Strict ratio > 1 so the decode scale
  // (g_max - g_min)/2 is nonzero.
  void validate() const;
};

struct ConductanceLevels {
  double g_min = 0.0;
  double g_max = 0.0;
  double g_ref = 0.0;  // (g_max + g_min) / 2
};

// Derives the two programmable states and the reference level. Accepts the
// degenerate on_off_ratio == 1 (all three levels equal); full config
// validation is stricter.
ConductanceLevels levels_from_config(const DeviceConfig& cfg);

// Identifies one crossbar-sized block within a network for deterministic
// variation sampling.
struct TileKey {
  int layer = 0;
  int block_row = 0;
  int block_col = 0;
};

// Gaussian device variation: each entry ~ Normal(mu = nominal, sigma =
// sigma_over_mu * nominal), clamped from below at nominal/100. Deterministic
// in (cfg.seed, key): entries are drawn row-major from a stream keyed by the
// tile, so results do not depend on call order or thread schedule.
Eigen::MatrixXd sample_variation(const Eigen::MatrixXd& nominal, const DeviceConfig& cfg,
                                 const TileKey& key);

}  // namespace xbnn
