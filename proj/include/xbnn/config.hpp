#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "xbnn/attacks.hpp"
#include "xbnn/dataset.hpp"
#include "xbnn/device.hpp"
#include "xbnn/mapping.hpp"

namespace xbnn {

// Everything an experiment run needs, loadable from a sectioned key = value
// file. Unknown sections or keys are rejected by name. Every key doubles as
// a CLI override through apply_config_kv ("section.key=value").
struct ExperimentConfig {
  DeviceConfig device;

  // [model]
  std::string arch =
      "conv(8,3,1,1);bn;sign;pool(2);conv(16,3,1,1);bn;sign;pool(2);flatten;"
      "dense(64);bn;sign;dense(10)";
  BinarizationPolicy policy;
  bool input_binary = false;
  std::string backend_plan = "auto";

  // [mapping]
  MapMode mode = MapMode::SwitchX;

  // [data]
  std::string train_path;
  std::string test_path;
  DataFormat format = DataFormat::CsvRows;
  int channels = 1;
  int height = 16;
  int width = 16;
  int classes = 10;

  // [train]
  double lr = 0.05;
  int epochs = 20;
  int batch = 32;
  bool adversarial = false;
  double adv_epsilon = 0.1;

  // [attack]
  AttackSpec attack;

  // [sweep]
  std::vector<double> sweep_epsilons = {0.05, 0.10, 0.15, 0.20, 0.25, 0.30};
  std::vector<int> sweep_sizes = {16, 32};
  std::vector<double> sweep_ratios = {10.0};
  std::vector<MapMode> sweep_modes = {MapMode::Normal, MapMode::SwitchX};
  std::vector<AttackMode> sweep_attack_modes = {AttackMode::SH, AttackMode::HH};
  AttackKind sweep_attack_kind = AttackKind::Fgsm;
  int eval_samples = 128;

  // [analysis]
  int power_samples = 8;
  NfIdealRef nf_ideal_ref = NfIdealRef::Nominal;

  // [experiment]
  std::uint64_t seed = 1;
  int threads = 1;

  // [output]
  std::string out_dir;

  std::string policy_tag() const;  // "standard" or "state-aware"

  // Resolves value-dependent defaults after all keys are applied: selecting
  // the state-aware policy without an explicit model.delta picks 1e-3.
  void finalize_defaults();
  void validate() const;
};

// Parses the file and applies every pair through apply_config_kv.
ExperimentConfig load_config(const std::string& path);

// Applies one "section.key" = value pair; throws ConfigError naming the key
// when it does not exist or the value does not parse.
void apply_config_kv(ExperimentConfig& cfg, const std::string& dotted_key,
                     const std::string& value);

// Output directory resolution: explicit CLI value > XBNN_OUT_DIR env >
// config [output] dir > "./out".
std::string resolve_out_dir(const ExperimentConfig& cfg, const std::string& cli_value);

}  // namespace xbnn
