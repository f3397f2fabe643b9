// Experiment orchestrator: train | map | infer | attack | sweep | report.
// Exit codes: 0 ok, 2 config error, 3 data error, 4 numeric failure.

#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "xbnn/analysis.hpp"
#include "xbnn/attacks.hpp"
#include "xbnn/config.hpp"
#include "xbnn/dataset.hpp"
#include "xbnn/errors.hpp"
#include "xbnn/network.hpp"
#include "xbnn/reporting.hpp"
#include "xbnn/train.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

struct Args {
  std::string config;
  std::string checkpoint;
  std::string out;
  std::string report_in;
  std::vector<std::string> sets;
  bool dump = false;
};

xbnn::ExperimentConfig load_cfg(const Args& a) {
  xbnn::ExperimentConfig cfg = xbnn::load_config(a.config);
  for (const std::string& kv : a.sets) {
    const std::size_t eq = kv.find('=');
    if (eq == std::string::npos)
      throw xbnn::ConfigError("--set expects section.key=value, got '" + kv + "'");
    xbnn::apply_config_kv(cfg, kv.substr(0, eq), kv.substr(eq + 1));
  }
  cfg.finalize_defaults();
  cfg.validate();
  return cfg;
}

std::string prepare_out_dir(const xbnn::ExperimentConfig& cfg, const Args& a) {
  const std::string dir = xbnn::resolve_out_dir(cfg, a.out);
  fs::create_directories(dir);
  return dir;
}

json device_json(const xbnn::DeviceConfig& d) {
  return json{{"rows", d.rows},
              {"cols", d.cols},
              {"r_min", d.r_min},
              {"on_off_ratio", d.on_off_ratio},
              {"r_driver", d.r_driver},
              {"r_wire_row", d.r_wire_row},
              {"r_wire_col", d.r_wire_col},
              {"r_sense", d.r_sense},
              {"sigma_over_mu", d.sigma_over_mu},
              {"v_read", d.v_read},
              {"seed", d.seed},
              {"vary_reference", d.vary_reference}};
}

void write_json(const std::string& path, const json& j) {
  xbnn::atomic_write(path, j.dump(2) + "\n");
}

xbnn::Dataset load_split(const xbnn::ExperimentConfig& cfg, const std::string& path) {
  if (path.empty()) throw xbnn::ConfigError("dataset path not set in config");
  return xbnn::ingest_dataset(path, cfg.format, cfg.channels, cfg.height, cfg.width,
                              cfg.classes);
}

xbnn::NetworkModel build_model(const xbnn::ExperimentConfig& cfg) {
  xbnn::NetworkModel model = xbnn::model_from_arch(
      cfg.arch, cfg.channels, cfg.height, cfg.width, cfg.policy, cfg.seed, cfg.input_binary);
  xbnn::apply_backend_plan(model, cfg.backend_plan);
  return model;
}

xbnn::Dataset eval_subset(const xbnn::ExperimentConfig& cfg) {
  xbnn::Dataset test = load_split(cfg, cfg.test_path);
  return xbnn::head(test, std::min(cfg.eval_samples, test.size()));
}

xbnn::AttackSpec sweep_spec(const xbnn::ExperimentConfig& cfg, double epsilon,
                            xbnn::AttackMode mode) {
  xbnn::AttackSpec s = cfg.attack;
  s.kind = cfg.sweep_attack_kind;
  s.epsilon = epsilon;
  s.mode = mode;
  s.seed = cfg.seed;
  return s;
}

int cmd_train(const Args& a) {
  const xbnn::ExperimentConfig cfg = load_cfg(a);
  const std::string out = prepare_out_dir(cfg, a);
  const xbnn::Dataset data = load_split(cfg, cfg.train_path);

  xbnn::NetworkModel model = build_model(cfg);
  xbnn::TrainHyper hyper;
  hyper.lr = cfg.lr;
  hyper.epochs = cfg.epochs;
  hyper.batch = cfg.batch;
  hyper.adversarial = cfg.adversarial;
  hyper.adv_epsilon = cfg.adv_epsilon;
  hyper.seed = cfg.seed;
  const xbnn::TrainReport report = xbnn::train(model, data, hyper);

  const std::string ckpt = out + "/checkpoint.bin";
  xbnn::save_checkpoint(model, ckpt);

  json manifest{{"command", "train"},
                {"arch", cfg.arch},
                {"policy", cfg.policy_tag()},
                {"delta", cfg.policy.delta_mag},
                {"seed", cfg.seed},
                {"device", device_json(cfg.device)},
                {"epochs", cfg.epochs},
                {"lr", cfg.lr},
                {"batch", cfg.batch},
                {"adversarial", cfg.adversarial},
                {"adv_epsilon", cfg.adv_epsilon},
                {"train_samples", data.size()},
                {"train_accuracy", report.train_accuracy},
                {"epoch_loss", report.epoch_loss},
                {"checkpoint", "checkpoint.bin"},
                {"checkpoint_sha256", xbnn::sha256_file(ckpt)}};
  write_json(out + "/train_manifest.json", manifest);
  std::cout << "trained " << cfg.arch << ": train accuracy " << report.train_accuracy
            << ", checkpoint " << ckpt << "\n";
  return 0;
}

int cmd_map(const Args& a) {
  const xbnn::ExperimentConfig cfg = load_cfg(a);
  const std::string out = prepare_out_dir(cfg, a);
  const xbnn::NetworkModel model = xbnn::load_checkpoint(a.checkpoint);
  const xbnn::MappedNetwork mapped =
      xbnn::map_network(model, cfg.device, cfg.mode, cfg.threads);

  json layers = json::array();
  json dump = json::array();
  for (const xbnn::MappedLayer& ml : mapped.layers) {
    int switched = 0;
    long hrs = 0, cells = 0;
    for (const xbnn::CrossbarInstance& inst : ml.tiles) {
      const xbnn::MappedTile& mt = *inst.mapped;
      switched += mt.sel ? 1 : 0;
      for (int r = 0; r < mt.mask.rows(); ++r)
        for (int c = 0; c < mt.mask.cols(); ++c)
          if (mt.mask(r, c)) {
            ++cells;
            hrs += mt.g(r, c) == mt.levels.g_min ? 1 : 0;
          }
      if (a.dump) dump.push_back(json::parse(xbnn::mapped_tile_to_json(mt)));
    }
    layers.push_back(json{{"layer_index", ml.layer_index},
                          {"u_rows", ml.u_rows},
                          {"u_cols", ml.u_cols},
                          {"block_rows", ml.block_rows},
                          {"block_cols", ml.block_cols},
                          {"tiles", ml.tiles.size()},
                          {"switched_tiles", switched},
                          {"hrs_fraction", cells ? static_cast<double>(hrs) / cells : 0.0}});
  }

  json manifest{{"command", "map"},
                {"mapping", to_string(cfg.mode)},
                {"policy", cfg.policy_tag()},
                {"device", device_json(cfg.device)},
                {"layers", layers},
                {"checkpoint_sha256", xbnn::sha256_file(a.checkpoint)}};
  write_json(out + "/map_manifest.json", manifest);
  if (a.dump) write_json(out + "/tiles.json", dump);
  std::cout << "mapped " << mapped.layers.size() << " layers (" << to_string(cfg.mode)
            << ") to " << out << "\n";
  return 0;
}

int cmd_infer(const Args& a) {
  const xbnn::ExperimentConfig cfg = load_cfg(a);
  const std::string out = prepare_out_dir(cfg, a);
  const xbnn::NetworkModel model = xbnn::load_checkpoint(a.checkpoint);
  const xbnn::Dataset eval = eval_subset(cfg);

  const double clean_sw = xbnn::evaluate_accuracy(model, eval.images, eval.labels);
  const xbnn::MappedNetwork mapped =
      xbnn::map_network(model, cfg.device, cfg.mode, cfg.threads);
  const double clean_hw = xbnn::evaluate_accuracy(mapped, eval.images, eval.labels);

  std::vector<xbnn::PowerRecord> power;
  double total_ideal = 0.0, total_nonideal = 0.0;
  for (const xbnn::LayerPowerStats& lp :
       xbnn::measure_power(mapped, eval.images, cfg.power_samples)) {
    xbnn::PowerRecord r;
    r.policy = cfg.policy_tag();
    r.mapping = cfg.mode;
    r.size = cfg.device.rows;
    r.ratio = cfg.device.on_off_ratio;
    r.layer = lp.layer_index;
    r.tiles = lp.tiles;
    r.mvm_ops = lp.mvm_ops;
    r.ideal_w = lp.ideal_w;
    r.ideal_weights_only_w = lp.ideal_weights_only_w;
    r.nonideal_w = lp.nonideal_w;
    power.push_back(r);
    total_ideal += lp.ideal_w;
    total_nonideal += lp.nonideal_w;
  }
  xbnn::write_power_csv(out + "/power.csv", power);

  std::vector<xbnn::NfRecord> nf;
  double nf_sum = 0.0;
  for (const xbnn::TileNfSample& s : xbnn::measure_nf(mapped, cfg.nf_ideal_ref)) {
    xbnn::NfRecord r;
    r.policy = cfg.policy_tag();
    r.mapping = cfg.mode;
    r.size = cfg.device.rows;
    r.ratio = cfg.device.on_off_ratio;
    r.layer = s.layer_index;
    r.block_row = s.block_row;
    r.block_col = s.block_col;
    r.nf = s.aggregate;
    nf.push_back(r);
    nf_sum += s.aggregate;
  }
  xbnn::write_nf_csv(out + "/nf.csv", nf);

  json summary{{"command", "infer"},
               {"mapping", to_string(cfg.mode)},
               {"policy", cfg.policy_tag()},
               {"size", cfg.device.rows},
               {"ratio", cfg.device.on_off_ratio},
               {"eval_samples", eval.size()},
               {"software_accuracy", clean_sw},
               {"mapped_accuracy", clean_hw},
               {"total_ideal_w", total_ideal},
               {"total_nonideal_w", total_nonideal},
               {"mean_tile_nf", nf.empty() ? 0.0 : nf_sum / static_cast<double>(nf.size())},
               {"checkpoint_sha256", xbnn::sha256_file(a.checkpoint)}};
  write_json(out + "/infer.json", summary);
  std::cout << "software accuracy " << clean_sw << ", mapped (" << to_string(cfg.mode)
            << ") accuracy " << clean_hw << "\n";
  return 0;
}

int cmd_attack(const Args& a) {
  const xbnn::ExperimentConfig cfg = load_cfg(a);
  const std::string out = prepare_out_dir(cfg, a);
  const xbnn::NetworkModel model = xbnn::load_checkpoint(a.checkpoint);
  const xbnn::Dataset eval = eval_subset(cfg);

  const xbnn::MappedNetwork mapped =
      xbnn::map_network(model, cfg.device, cfg.mode, cfg.threads);
  xbnn::AttackSpec spec = cfg.attack;
  spec.seed = cfg.seed;
  const xbnn::AttackEval ev = xbnn::run_attack(model, &mapped, eval.images, eval.labels, spec);

  xbnn::write_attack_records_csv(out + "/attack_records.csv", ev.records);

  std::vector<xbnn::AnsRecord> ans_rows;
  auto push_ans = [&](int layer, double value, bool excluded) {
    xbnn::AnsRecord r;
    r.policy = cfg.policy_tag();
    r.mapping = cfg.mode;
    r.size = cfg.device.rows;
    r.ratio = cfg.device.on_off_ratio;
    r.kind = spec.kind;
    r.mode = spec.mode;
    r.epsilon = spec.epsilon;
    r.layer = layer;
    r.ans = value;
    r.excluded = excluded;
    ans_rows.push_back(r);
  };
  for (const auto& [layer, value] : ev.ans.per_layer) push_ans(layer, value, false);
  for (int layer : ev.ans.excluded) push_ans(layer, 0.0, true);
  xbnn::write_ans_csv(out + "/ans.csv", ans_rows);

  json summary{{"command", "attack"},
               {"attack", to_string(spec.kind)},
               {"mode", to_string(spec.mode)},
               {"epsilon", spec.epsilon},
               {"mapping", to_string(cfg.mode)},
               {"policy", cfg.policy_tag()},
               {"eval_samples", eval.size()},
               {"clean_accuracy", ev.clean_accuracy},
               {"adv_accuracy", ev.adv_accuracy},
               {"checkpoint_sha256", xbnn::sha256_file(a.checkpoint)}};
  write_json(out + "/attack.json", summary);
  std::cout << "attack " << to_string(spec.kind) << "/" << to_string(spec.mode) << " eps "
            << spec.epsilon << ": clean " << ev.clean_accuracy << ", adversarial "
            << ev.adv_accuracy << "\n";
  return 0;
}

int cmd_sweep(const Args& a) {
  const xbnn::ExperimentConfig cfg = load_cfg(a);
  const std::string out = prepare_out_dir(cfg, a);
  const xbnn::NetworkModel model = xbnn::load_checkpoint(a.checkpoint);
  const xbnn::Dataset eval = eval_subset(cfg);
  const xbnn::Tensor& X = eval.images;
  const std::vector<int>& y = eval.labels;

  const double clean_sw = xbnn::evaluate_accuracy(model, X, y);
  std::map<double, double> adv_sw;  // software self-attack baseline per epsilon
  for (double eps : cfg.sweep_epsilons) {
    const xbnn::AttackSpec s = sweep_spec(cfg, eps, xbnn::AttackMode::SH);
    adv_sw[eps] = xbnn::run_attack(model, nullptr, X, y, s).adv_accuracy;
  }

  std::vector<xbnn::RobustnessPoint> points;
  std::vector<xbnn::PowerRecord> power;
  std::vector<xbnn::NfRecord> nf;
  std::vector<xbnn::AnsRecord> ans_rows;

  for (int size : cfg.sweep_sizes) {
    for (double ratio : cfg.sweep_ratios) {
      xbnn::DeviceConfig dev = cfg.device;
      dev.rows = size;
      dev.cols = size;
      dev.on_off_ratio = ratio;
      for (xbnn::MapMode mode : cfg.sweep_modes) {
        const xbnn::MappedNetwork mapped = xbnn::map_network(model, dev, mode, cfg.threads);
        const double clean_hw = xbnn::evaluate_accuracy(mapped, X, y);

        for (const xbnn::LayerPowerStats& lp :
             xbnn::measure_power(mapped, X, cfg.power_samples)) {
          xbnn::PowerRecord r;
          r.policy = cfg.policy_tag();
          r.mapping = mode;
          r.size = size;
          r.ratio = ratio;
          r.layer = lp.layer_index;
          r.tiles = lp.tiles;
          r.mvm_ops = lp.mvm_ops;
          r.ideal_w = lp.ideal_w;
          r.ideal_weights_only_w = lp.ideal_weights_only_w;
          r.nonideal_w = lp.nonideal_w;
          power.push_back(r);
        }
        for (const xbnn::TileNfSample& s : xbnn::measure_nf(mapped, cfg.nf_ideal_ref)) {
          xbnn::NfRecord r;
          r.policy = cfg.policy_tag();
          r.mapping = mode;
          r.size = size;
          r.ratio = ratio;
          r.layer = s.layer_index;
          r.block_row = s.block_row;
          r.block_col = s.block_col;
          r.nf = s.aggregate;
          nf.push_back(r);
        }

        for (xbnn::AttackMode am : cfg.sweep_attack_modes) {
          for (double eps : cfg.sweep_epsilons) {
            const xbnn::AttackSpec spec = sweep_spec(cfg, eps, am);
            const xbnn::AttackEval ev = xbnn::run_attack(model, &mapped, X, y, spec);

            xbnn::RobustnessPoint p;
            p.policy = cfg.policy_tag();
            p.mapping = mode;
            p.size = size;
            p.ratio = ratio;
            p.kind = spec.kind;
            p.mode = am;
            p.epsilon = eps;
            p.delta_clean = 100.0 * (clean_hw - clean_sw);
            p.delta_adv = 100.0 * (ev.adv_accuracy - adv_sw[eps]);
            points.push_back(p);

            auto push_ans = [&](int layer, double value, bool excluded) {
              xbnn::AnsRecord r;
              r.policy = cfg.policy_tag();
              r.mapping = mode;
              r.size = size;
              r.ratio = ratio;
              r.kind = spec.kind;
              r.mode = am;
              r.epsilon = eps;
              r.layer = layer;
              r.ans = value;
              r.excluded = excluded;
              ans_rows.push_back(r);
            };
            for (const auto& [layer, value] : ev.ans.per_layer) push_ans(layer, value, false);
            for (int layer : ev.ans.excluded) push_ans(layer, 0.0, true);
          }
        }
      }
    }
  }

  xbnn::write_robustness_csv(out + "/robustness_map.csv", points);
  xbnn::write_power_csv(out + "/power.csv", power);
  xbnn::write_nf_csv(out + "/nf.csv", nf);
  xbnn::write_ans_csv(out + "/ans.csv", ans_rows);

  json baselines = json::object();
  for (const auto& [eps, acc] : adv_sw) baselines[xbnn::format_double(eps)] = acc;
  json manifest{{"command", "sweep"},
                {"policy", cfg.policy_tag()},
                {"attack", to_string(cfg.sweep_attack_kind)},
                {"sizes", cfg.sweep_sizes},
                {"ratios", cfg.sweep_ratios},
                {"epsilons", cfg.sweep_epsilons},
                {"eval_samples", eval.size()},
                {"software_clean_accuracy", clean_sw},
                {"software_adv_accuracy", baselines},
                {"seed", cfg.seed},
                {"device", device_json(cfg.device)},
                {"checkpoint_sha256", xbnn::sha256_file(a.checkpoint)}};
  write_json(out + "/sweep_manifest.json", manifest);
  std::cout << "sweep wrote " << points.size() << " robustness points to " << out << "\n";
  return 0;
}

int cmd_report(const Args& a) {
  const std::string in = a.report_in;
  if (in.empty()) throw xbnn::ConfigError("report requires --in <dir>");
  const std::string out = a.out.empty() ? in : a.out;
  fs::create_directories(out);

  json summary{{"command", "report"}, {"inputs", json::array()}};

  if (fs::exists(in + "/power.csv")) {
    const auto records = xbnn::read_power_csv(in + "/power.csv");
    const auto savings = xbnn::power_summary(records);
    xbnn::write_power_savings_csv(out + "/power_savings.csv", savings);
    summary["inputs"].push_back("power.csv");
    json rows = json::array();
    for (const xbnn::PowerSavings& s : savings)
      if (s.layer == -1)
        rows.push_back(json{{"policy", s.policy},
                            {"size", s.size},
                            {"ratio", s.ratio},
                            {"saving_ideal", s.saving_ideal},
                            {"saving_nonideal", s.saving_nonideal}});
    summary["total_power_savings"] = rows;
  }

  if (fs::exists(in + "/nf.csv")) {
    const auto records = xbnn::read_nf_csv(in + "/nf.csv");
    const auto rows = xbnn::nf_summary(records);
    xbnn::write_nf_summary_csv(out + "/nf_summary.csv", rows);
    summary["inputs"].push_back("nf.csv");
    json cells = json::array();
    for (const xbnn::NfSummaryRow& r : rows)
      cells.push_back(json{{"policy", r.policy},
                           {"mapping", to_string(r.mapping)},
                           {"size", r.size},
                           {"ratio", r.ratio},
                           {"count", r.count},
                           {"median", r.median}});
    summary["nf_medians"] = cells;
  }

  if (fs::exists(in + "/robustness_map.csv")) {
    const auto points = xbnn::read_robustness_csv(in + "/robustness_map.csv");
    summary["inputs"].push_back("robustness_map.csv");
    std::map<std::string, std::vector<xbnn::RobustnessPoint>> groups;
    for (const xbnn::RobustnessPoint& p : points)
      groups[p.policy + "|" + to_string(p.mapping) + "|" + std::to_string(p.size) + "|" +
             xbnn::format_double(p.ratio) + "|" + to_string(p.kind) + "|" + to_string(p.mode)]
          .push_back(p);
    json rows = json::array();
    for (const auto& [key, group] : groups) {
      int favorable = 0, unfavorable = 0, neutral = 0;
      for (const xbnn::RobustnessPoint& p : group) {
        const std::string region = xbnn::classify_region(p.delta_clean, p.delta_adv);
        if (region == "favorable") ++favorable;
        else if (region == "unfavorable") ++unfavorable;
        else ++neutral;
      }
      rows.push_back(json{{"group", key},
                          {"points", group.size()},
                          {"favorable", favorable},
                          {"unfavorable", unfavorable},
                          {"neutral", neutral},
                          {"dispersion", xbnn::dispersion(group)}});
    }
    summary["robustness_groups"] = rows;
  }

  if (summary["inputs"].empty())
    throw xbnn::DataError("no report inputs found in " + in +
                          " (expected power.csv, nf.csv or robustness_map.csv)");
  write_json(out + "/report.json", summary);
  std::cout << "report written to " << out << "/report.json\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"xbnn: binary networks on non-ideal resistive crossbars"};
  app.require_subcommand(1);
  Args args;

  auto add_common = [&](CLI::App* cmd, bool needs_config, bool needs_checkpoint) {
    if (needs_config)
      cmd->add_option("--config", args.config, "experiment config file")->required();
    if (needs_checkpoint)
      cmd->add_option("--checkpoint", args.checkpoint, "model checkpoint")->required();
    cmd->add_option("--out", args.out, "output directory (overrides XBNN_OUT_DIR and config)");
    cmd->add_option("--set", args.sets, "override a config value: section.key=value");
  };

  CLI::App* c_train = app.add_subcommand("train", "train a model and write a checkpoint");
  add_common(c_train, true, false);
  CLI::App* c_map = app.add_subcommand("map", "map a checkpoint onto crossbar tiles");
  add_common(c_map, true, true);
  c_map->add_flag("--dump", args.dump, "dump every mapped tile to tiles.json");
  CLI::App* c_infer = app.add_subcommand("infer", "clean accuracy, power and NF");
  add_common(c_infer, true, true);
  CLI::App* c_attack = app.add_subcommand("attack", "run the configured attack");
  add_common(c_attack, true, true);
  CLI::App* c_sweep = app.add_subcommand("sweep", "grid over sizes/ratios/modes/epsilons");
  add_common(c_sweep, true, true);
  CLI::App* c_report = app.add_subcommand("report", "aggregate CSVs from a run directory");
  c_report->add_option("--in", args.report_in, "directory with run CSVs")->required();
  c_report->add_option("--out", args.out, "output directory (defaults to --in)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (c_train->parsed()) return cmd_train(args);
    if (c_map->parsed()) return cmd_map(args);
    if (c_infer->parsed()) return cmd_infer(args);
    if (c_attack->parsed()) return cmd_attack(args);
    if (c_sweep->parsed()) return cmd_sweep(args);
    if (c_report->parsed()) return cmd_report(args);
  } catch (const xbnn::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const xbnn::DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const xbnn::NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 4;
  }
  return 0;
}
