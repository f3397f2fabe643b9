#include "xbnn/config.hpp"

#include <charconv>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "xbnn/errors.hpp"

namespace xbnn {

namespace {

std::string trim(const std::string& s) {
  const std::size_t a = s.find_first_not_of(" \t\r");
  const std::size_t b = s.find_last_not_of(" \t\r");
  if (a == std::string::npos) return "";
  return s.substr(a, b - a + 1);
}

double to_double(const std::string& key, const std::string& v) {
  double out = 0.0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size())
    throw ConfigError(key + ": not a number: '" + v + "'");
  return out;
}

int to_int(const std::string& key, const std::string& v) {
  int out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size())
    throw ConfigError(key + ": not an integer: '" + v + "'");
  return out;
}

std::uint64_t to_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size())
    throw ConfigError(key + ": not an unsigned integer: '" + v + "'");
  return out;
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError(key + ": not a boolean: '" + v + "'");
}

std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

}  // namespace

std::string ExperimentConfig::policy_tag() const {
  return to_string(policy.mode);
}

void ExperimentConfig::finalize_defaults() {
  if (policy.mode == BinarizationPolicy::Mode::StateAware && policy.delta_mag == 0.0)
    policy.delta_mag = 1e-3;
}

void ExperimentConfig::validate() const {
  device.validate();
  if (policy.mode == BinarizationPolicy::Mode::Standard && policy.delta_mag != 0.0)
    throw ConfigError("model.delta must be 0 under the standard policy");
  if (policy.delta_mag < 0.0) throw ConfigError("model.delta must be >= 0");
  if (channels <= 0 || height <= 0 || width <= 0 || classes <= 0)
    throw ConfigError("data geometry must be positive");
  if (lr <= 0.0) throw ConfigError("train.lr must be positive");
  if (epochs < 0) throw ConfigError("train.epochs must be >= 0");
  if (batch <= 0) throw ConfigError("train.batch must be positive");
  if (adv_epsilon < 0.0) throw ConfigError("train.adv_epsilon must be >= 0");
  attack.validate();
  if (sweep_epsilons.empty()) throw ConfigError("sweep.epsilons must be nonempty");
  for (double e : sweep_epsilons)
    if (e < 0.0) throw ConfigError("sweep.epsilons must be >= 0");
  if (sweep_sizes.empty()) throw ConfigError("sweep.sizes must be nonempty");
  for (int s : sweep_sizes)
    if (s <= 0) throw ConfigError("sweep.sizes must be positive");
  for (double r : sweep_ratios)
    if (r <= 1.0) throw ConfigError("sweep.ratios must be > 1");
  if (sweep_modes.empty()) throw ConfigError("sweep.modes must be nonempty");
  if (sweep_attack_modes.empty()) throw ConfigError("sweep.attack_modes must be nonempty");
  if (eval_samples <= 0) throw ConfigError("sweep.eval_samples must be positive");
  if (power_samples <= 0) throw ConfigError("analysis.power_samples must be positive");
  if (threads <= 0) throw ConfigError("experiment.threads must be positive");
}

void apply_config_kv(ExperimentConfig& cfg, const std::string& dotted_key,
                     const std::string& value) {
  const std::size_t dot = dotted_key.find('.');
  if (dot == std::string::npos)
    throw ConfigError("config key must be section.key: '" + dotted_key + "'");
  const std::string section = dotted_key.substr(0, dot);
  const std::string key = dotted_key.substr(dot + 1);
  const std::string& v = value;
  const std::string& k = dotted_key;

  if (section == "device") {
    if (key == "rows") cfg.device.rows = to_int(k, v);
    else if (key == "cols") cfg.device.cols = to_int(k, v);
    else if (key == "r_min") cfg.device.r_min = to_double(k, v);
    else if (key == "on_off_ratio") cfg.device.on_off_ratio = to_double(k, v);
    else if (key == "r_driver") cfg.device.r_driver = to_double(k, v);
    else if (key == "r_wire_row") cfg.device.r_wire_row = to_double(k, v);
    else if (key == "r_wire_col") cfg.device.r_wire_col = to_double(k, v);
    else if (key == "r_sense") cfg.device.r_sense = to_double(k, v);
    else if (key == "sigma_over_mu") cfg.device.sigma_over_mu = to_double(k, v);
    else if (key == "v_read") cfg.device.v_read = to_double(k, v);
    else if (key == "seed") cfg.device.seed = to_u64(k, v);
    else if (key == "vary_reference") cfg.device.vary_reference = to_bool(k, v);
    else throw ConfigError("unknown config key '" + k + "'");
  } else if (section == "model") {
    if (key == "arch") cfg.arch = v;
    else if (key == "policy") cfg.policy.mode = policy_mode_from_string(v);
    else if (key == "delta") cfg.policy.delta_mag = to_double(k, v);
    else if (key == "input_binary") cfg.input_binary = to_bool(k, v);
    else if (key == "backend_plan") cfg.backend_plan = v;
    else throw ConfigError("unknown config key '" + k + "'");
  } else if (section == "mapping") {
    if (key == "mode") cfg.mode = map_mode_from_string(v);
    else throw ConfigError("unknown config key '" + k + "'");
  } else if (section == "data") {
    if (key == "train_path") cfg.train_path = v;
    else if (key == "test_path") cfg.test_path = v;
    else if (key == "format") cfg.format = data_format_from_string(v);
    else if (key == "channels") cfg.channels = to_int(k, v);
    else if (key == "height") cfg.height = to_int(k, v);
    else if (key == "width") cfg.width = to_int(k, v);
    else if (key == "classes") cfg.classes = to_int(k, v);
    else throw ConfigError("unknown config key '" + k + "'");
  } else if (section == "train") {
    if (key == "lr") cfg.lr = to_double(k, v);
    else if (key == "epochs") cfg.epochs = to_int(k, v);
    else if (key == "batch") cfg.batch = to_int(k, v);
    else if (key == "adversarial") cfg.adversarial = to_bool(k, v);
    else if (key == "adv_epsilon") cfg.adv_epsilon = to_double(k, v);
    else throw ConfigError("unknown config key '" + k + "'");
  } else if (section == "attack") {
    if (key == "kind") cfg.attack.kind = attack_kind_from_string(v);
    else if (key == "mode") cfg.attack.mode = attack_mode_from_string(v);
    else if (key == "epsilon") cfg.attack.epsilon = to_double(k, v);
    else if (key == "pgd_steps") cfg.attack.pgd_steps = to_int(k, v);
    else if (key == "pgd_alpha") cfg.attack.pgd_alpha = to_double(k, v);
    else if (key == "clip_lo") cfg.attack.clip_lo = to_double(k, v);
    else if (key == "clip_hi") cfg.attack.clip_hi = to_double(k, v);
    else if (key == "random_start") cfg.attack.pgd_random_start = to_bool(k, v);
    else throw ConfigError("unknown config key '" + k + "'");
  } else if (section == "sweep") {
    if (key == "epsilons") {
      cfg.sweep_epsilons.clear();
      for (const std::string& item : split_list(v))
        cfg.sweep_epsilons.push_back(to_double(k, item));
    } else if (key == "sizes") {
      cfg.sweep_sizes.clear();
      for (const std::string& item : split_list(v)) cfg.sweep_sizes.push_back(to_int(k, item));
    } else if (key == "ratios") {
      cfg.sweep_ratios.clear();
      for (const std::string& item : split_list(v))
        cfg.sweep_ratios.push_back(to_double(k, item));
    } else if (key == "modes") {
      cfg.sweep_modes.clear();
      for (const std::string& item : split_list(v))
        cfg.sweep_modes.push_back(map_mode_from_string(item));
    } else if (key == "attack_modes") {
      cfg.sweep_attack_modes.clear();
      for (const std::string& item : split_list(v))
        cfg.sweep_attack_modes.push_back(attack_mode_from_string(item));
    } else if (key == "attack_kind") {
      cfg.sweep_attack_kind = attack_kind_from_string(v);
    } else if (key == "eval_samples") {
      cfg.eval_samples = to_int(k, v);
    } else {
      throw ConfigError("unknown config key '" + k + "'");
    }
  } else if (section == "analysis") {
    if (key == "power_samples") cfg.power_samples = to_int(k, v);
    else if (key == "nf_ideal_ref") {
      if (v == "nominal") cfg.nf_ideal_ref = NfIdealRef::Nominal;
      else if (v == "varied") cfg.nf_ideal_ref = NfIdealRef::Varied;
      else throw ConfigError(k + ": expected nominal or varied, got '" + v + "'");
    } else throw ConfigError("unknown config key '" + k + "'");
  } else if (section == "experiment") {
    if (key == "seed") cfg.seed = to_u64(k, v);
    else if (key == "threads") cfg.threads = to_int(k, v);
    else throw ConfigError("unknown config key '" + k + "'");
  } else if (section == "output") {
    if (key == "dir") cfg.out_dir = v;
    else throw ConfigError("unknown config key '" + k + "'");
  } else {
    throw ConfigError("unknown config section '" + section + "'");
  }
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file: " + path);

  ExperimentConfig cfg;
  std::string line;
  std::string section;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    // strip trailing comment (unquoted values only in this format)
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']')
        throw ConfigError(path + ":" + std::to_string(line_no) + ": unterminated section");
      section = trim(line.substr(1, line.size() - 2));
      if (section.empty())
        throw ConfigError(path + ":" + std::to_string(line_no) + ": empty section name");
      continue;
    }
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(path + ":" + std::to_string(line_no) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty())
      throw ConfigError(path + ":" + std::to_string(line_no) + ": empty key");
    if (section.empty())
      throw ConfigError(path + ":" + std::to_string(line_no) + ": key '" + key +
                        "' outside any section");
    try {
      apply_config_kv(cfg, section + "." + key, value);
    } catch (const ConfigError& e) {
      throw ConfigError(path + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  cfg.finalize_defaults();
  return cfg;
}

std::string resolve_out_dir(const ExperimentConfig& cfg, const std::string& cli_value) {
  if (!cli_value.empty()) return cli_value;
  if (const char* env = std::getenv("XBNN_OUT_DIR"); env && *env) return env;
  if (!cfg.out_dir.empty()) return cfg.out_dir;
  return "out";
}

}  // namespace xbnn
