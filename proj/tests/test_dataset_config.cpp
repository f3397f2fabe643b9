#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include "xbnn/errors.hpp"
#include "xbnn/config.hpp"
#include "xbnn/dataset.hpp"
#include "xbnn/reporting.hpp"

using namespace xbnn;
namespace fs = std::filesystem;

namespace {

fs::path test_dir() {
  const fs::path dir = fs::temp_directory_path() / "xbnn_dataset_test";
  fs::create_directories(dir);
  return dir;
}

GratingSpec small_spec() {
  GratingSpec spec;
  spec.per_class = 5;
  spec.classes = 3;
  spec.size = 8;
  spec.noise = 0.05;
  spec.seed = 11;
  spec.split_tag = 0;
  return spec;
}

bool same_dataset(const Dataset& a, const Dataset& b) {
  if (a.num_classes != b.num_classes || a.labels != b.labels) return false;
  if (a.images.shape() != b.images.shape()) return false;
  for (std::size_t i = 0; i < a.images.size(); ++i)
    if (a.images[i] != b.images[i]) return false;
  return true;
}

}  // namespace

TEST_CASE("grating corpus is deterministic and class-structured") {
  const GratingSpec spec = small_spec();
  const Dataset a = synthetic_gratings(spec);
  const Dataset b = synthetic_gratings(spec);
  CHECK(same_dataset(a, b));
  CHECK(dataset_hash(a) == dataset_hash(b));

  REQUIRE(a.size() == 15);
  CHECK(a.num_classes == 3);
  CHECK(a.images.dim(1) == 1);
  CHECK(a.images.dim(2) == 8);
  CHECK(a.images.dim(3) == 8);
  for (int i = 0; i < a.size(); ++i) CHECK(a.labels[i] == i / 5);

  // Pixels live on the byte grid in [0,1].
  for (std::size_t i = 0; i < a.images.size(); ++i) {
    CHECK(a.images[i] >= 0.0);
    CHECK(a.images[i] <= 1.0);
    const double scaled = a.images[i] * 255.0;
    CHECK(std::abs(scaled - std::round(scaled)) < 1e-9);
  }

  GratingSpec other = spec;
  other.seed = 12;
  CHECK(dataset_hash(synthetic_gratings(other)) != dataset_hash(a));

  // The test split draws different samples under the same seed.
  GratingSpec test_split = spec;
  test_split.split_tag = 1;
  CHECK(dataset_hash(synthetic_gratings(test_split)) != dataset_hash(a));

  GratingSpec bad = spec;
  bad.per_class = 0;
  CHECK_THROWS_AS(synthetic_gratings(bad), ConfigError);
  bad = spec;
  bad.noise = -0.1;
  CHECK_THROWS_AS(synthetic_gratings(bad), ConfigError);
}

TEST_CASE("csv and idx exports of a byte-grid corpus round-trip bit-exactly") {
  const Dataset data = synthetic_gratings(small_spec());
  const fs::path dir = test_dir();

  const fs::path csv = dir / "corpus.csv";
  write_dataset_csv(data, csv.string());
  const Dataset from_csv =
      ingest_dataset(csv.string(), DataFormat::CsvRows, 1, 8, 8, 3);
  CHECK(same_dataset(from_csv, data));
  CHECK(dataset_hash(from_csv) == dataset_hash(data));

  const fs::path idx = dir / "corpus-images.idx";
  write_dataset_idx(data, idx.string());
  const Dataset from_idx =
      ingest_dataset(idx.string(), DataFormat::IdxBinary, 1, 8, 8, 3);
  CHECK(same_dataset(from_idx, data));
  CHECK(dataset_hash(from_idx) == dataset_hash(from_csv));
}

TEST_CASE("idx export refuses pixels off the byte grid") {
  Dataset data;
  data.images = Tensor({1, 1, 1, 2});
  data.images[0] = 0.5;  // not k/255
  data.images[1] = 1.0;
  data.labels = {0};
  data.num_classes = 1;
  CHECK_THROWS_AS(write_dataset_idx(data, (test_dir() / "bad-images.idx").string()),
                  DataError);
}

TEST_CASE("csv ingest validates labels, pixels and geometry") {
  const fs::path dir = test_dir();
  auto write = [&](const std::string& name, const std::string& text) {
    std::ofstream os(dir / name);
    os << text;
    return (dir / name).string();
  };

  CHECK_THROWS_AS(ingest_dataset((dir / "missing.csv").string(), DataFormat::CsvRows,
                                 1, 2, 2, 2),
                  DataError);
  // Label out of range.
  CHECK_THROWS_AS(ingest_dataset(write("l.csv", "5,0,0,0,0\n"), DataFormat::CsvRows,
                                 1, 2, 2, 2),
                  DataError);
  // Pixel outside [0,1].
  CHECK_THROWS_AS(ingest_dataset(write("p.csv", "0,0,0,0,1.5\n"), DataFormat::CsvRows,
                                 1, 2, 2, 2),
                  DataError);
  // Wrong pixel count for the configured geometry.
  CHECK_THROWS_AS(ingest_dataset(write("c.csv", "0,0,0,0\n"), DataFormat::CsvRows,
                                 1, 2, 2, 2),
                  DataError);
  // Junk field.
  CHECK_THROWS_AS(ingest_dataset(write("j.csv", "0,0,zero,0,0\n"), DataFormat::CsvRows,
                                 1, 2, 2, 2),
                  DataError);
  // Bad geometry config.
  CHECK_THROWS_AS(ingest_dataset(write("g.csv", "0,0,0,0,0\n"), DataFormat::CsvRows,
                                 1, 0, 2, 2),
                  ConfigError);

  // A good file parses.
  const Dataset ok = ingest_dataset(write("ok.csv", "1,0,0.5,1,0.25\n0,1,1,0,0\n"),
                                    DataFormat::CsvRows, 1, 2, 2, 2);
  CHECK(ok.size() == 2);
  CHECK(ok.labels[0] == 1);
  CHECK(ok.images.at(0, 0, 0, 1) == 0.5);
}

TEST_CASE("idx ingest rejects structural corruption") {
  const Dataset data = synthetic_gratings(small_spec());
  const fs::path dir = test_dir();
  const fs::path idx = dir / "x-images.idx";
  write_dataset_idx(data, idx.string());

  // Path without 'images' cannot locate the label sibling.
  fs::copy_file(idx, dir / "plain.idx", fs::copy_options::overwrite_existing);
  CHECK_THROWS_AS(ingest_dataset((dir / "plain.idx").string(), DataFormat::IdxBinary,
                                 1, 8, 8, 3),
                  DataError);

  // Bad magic byte.
  {
    std::fstream f(idx, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(0);
    f.put('\x7f');
  }
  CHECK_THROWS_AS(ingest_dataset(idx.string(), DataFormat::IdxBinary, 1, 8, 8, 3),
                  DataError);

  // Truncated payload.
  write_dataset_idx(data, idx.string());
  fs::resize_file(idx, fs::file_size(idx) / 2);
  CHECK_THROWS_AS(ingest_dataset(idx.string(), DataFormat::IdxBinary, 1, 8, 8, 3),
                  DataError);

  // Geometry mismatch.
  write_dataset_idx(data, idx.string());
  CHECK_THROWS_AS(ingest_dataset(idx.string(), DataFormat::IdxBinary, 1, 16, 16, 3),
                  DataError);
}

TEST_CASE("head and select slice samples without copying surprises") {
  const Dataset data = synthetic_gratings(small_spec());
  const Dataset h = head(data, 4);
  CHECK(h.size() == 4);
  CHECK(h.num_classes == data.num_classes);
  for (int i = 0; i < 4; ++i) {
    CHECK(h.labels[i] == data.labels[i]);
    for (int p = 0; p < 64; ++p)
      CHECK(h.images.at(i, 0, p / 8, p % 8) == data.images.at(i, 0, p / 8, p % 8));
  }
  CHECK_THROWS_AS(head(data, 0), DataError);
  CHECK_THROWS_AS(head(data, data.size() + 1), DataError);

  const std::vector<int> idx = {7, 2};
  const Tensor imgs = select_images(data, idx);
  const std::vector<int> labels = select_labels(data, idx);
  CHECK(imgs.dim(0) == 2);
  CHECK(labels[0] == data.labels[7]);
  CHECK(labels[1] == data.labels[2]);
  CHECK(imgs.at(0, 0, 3, 3) == data.images.at(7, 0, 3, 3));
  CHECK(imgs.at(1, 0, 5, 1) == data.images.at(2, 0, 5, 1));
}

TEST_CASE("dataset format names round-trip") {
  CHECK(data_format_from_string("csv-rows") == DataFormat::CsvRows);
  CHECK(data_format_from_string("idx-binary") == DataFormat::IdxBinary);
  CHECK(to_string(DataFormat::CsvRows) == "csv-rows");
  CHECK(to_string(DataFormat::IdxBinary) == "idx-binary");
  CHECK_THROWS_AS(data_format_from_string("parquet"), ConfigError);
}

TEST_CASE("config files parse sections, comments and typed values") {
  const fs::path path = test_dir() / "run.ini";
  {
    std::ofstream os(path);
    os << "# experiment sweep at paper parasitics\n"
       << "[device]\n"
       << "rows = 32\n"
       << "cols = 32\n"
       << "on_off_ratio = 100   # HRS/LRS\n"
       << "vary_reference = false\n"
       << "[model]\n"
       << "arch = flatten;dense(4)\n"
       << "policy = state-aware\n"
       << "[mapping]\n"
       << "mode = switchx\n"
       << "[train]\n"
       << "epochs = 3\n"
       << "adversarial = yes\n"
       << "[sweep]\n"
       << "epsilons = 0.05, 0.10, 0.25\n"
       << "sizes = 16,32,64\n"
       << "modes = normal, switchx\n"
       << "attack_modes = SH,HH\n"
       << "[experiment]\n"
       << "threads = 2\n"
       << "[output]\n"
       << "dir = /tmp/xbnn-run\n";
  }
  const ExperimentConfig cfg = load_config(path.string());
  CHECK(cfg.device.rows == 32);
  CHECK(cfg.device.on_off_ratio == 100.0);
  CHECK_FALSE(cfg.device.vary_reference);
  CHECK(cfg.arch == "flatten;dense(4)");
  CHECK(cfg.policy.mode == BinarizationPolicy::Mode::StateAware);
  // Selecting the state-aware policy without model.delta resolves to 1e-3.
  CHECK(cfg.policy.delta_mag == 1e-3);
  CHECK(cfg.mode == MapMode::SwitchX);
  CHECK(cfg.epochs == 3);
  CHECK(cfg.adversarial);
  REQUIRE(cfg.sweep_epsilons.size() == 3);
  CHECK(cfg.sweep_epsilons[1] == 0.10);
  REQUIRE(cfg.sweep_sizes.size() == 3);
  CHECK(cfg.sweep_sizes[2] == 64);
  REQUIRE(cfg.sweep_modes.size() == 2);
  CHECK(cfg.sweep_modes[0] == MapMode::Normal);
  CHECK(cfg.threads == 2);
  CHECK(cfg.out_dir == "/tmp/xbnn-run");
  CHECK_NOTHROW(cfg.validate());

  CHECK(cfg.policy_tag() == "state-aware");
}

TEST_CASE("config errors name the offending key or line") {
  ExperimentConfig cfg;
  CHECK_THROWS_WITH_AS(apply_config_kv(cfg, "device.resistance", "5"),
                       doctest::Contains("device.resistance"), ConfigError);
  CHECK_THROWS_WITH_AS(apply_config_kv(cfg, "warp.speed", "9"),
                       doctest::Contains("warp"), ConfigError);
  CHECK_THROWS_WITH_AS(apply_config_kv(cfg, "rows", "8"), doctest::Contains("section.key"),
                       ConfigError);
  CHECK_THROWS_WITH_AS(apply_config_kv(cfg, "device.rows", "eight"),
                       doctest::Contains("device.rows"), ConfigError);
  CHECK_THROWS_AS(apply_config_kv(cfg, "train.adversarial", "maybe"), ConfigError);

  const fs::path dir = test_dir();
  auto write = [&](const std::string& name, const std::string& text) {
    std::ofstream os(dir / name);
    os << text;
    return (dir / name).string();
  };
  CHECK_THROWS_AS(load_config((dir / "missing.ini").string()), ConfigError);
  CHECK_THROWS_WITH_AS(load_config(write("bad1.ini", "[device\nrows = 8\n")),
                       doctest::Contains("unterminated"), ConfigError);
  CHECK_THROWS_WITH_AS(load_config(write("bad2.ini", "rows = 8\n")),
                       doctest::Contains("outside any section"), ConfigError);
  CHECK_THROWS_WITH_AS(load_config(write("bad3.ini", "[device]\nrows\n")),
                       doctest::Contains("expected key = value"), ConfigError);
}

TEST_CASE("config validation rejects inconsistent settings") {
  ExperimentConfig cfg;
  CHECK_NOTHROW(cfg.validate());

  // A nonzero threshold is exclusive to the state-aware policy.
  cfg.policy.delta_mag = 1e-3;
  CHECK_THROWS_WITH_AS(cfg.validate(), doctest::Contains("model.delta"), ConfigError);
  cfg.policy.mode = BinarizationPolicy::Mode::StateAware;
  CHECK_NOTHROW(cfg.validate());
  cfg = ExperimentConfig{};

  cfg.lr = 0.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = ExperimentConfig{};
  cfg.batch = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = ExperimentConfig{};
  cfg.sweep_epsilons.clear();
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = ExperimentConfig{};
  cfg.sweep_ratios = {1.0};  // ratio must exceed 1
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = ExperimentConfig{};
  cfg.threads = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = ExperimentConfig{};
  cfg.eval_samples = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = ExperimentConfig{};
  cfg.height = -1;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("state-aware delta default only fills in when unset") {
  ExperimentConfig cfg;
  apply_config_kv(cfg, "model.policy", "state-aware");
  cfg.finalize_defaults();
  CHECK(cfg.policy.delta_mag == 1e-3);

  ExperimentConfig explicit_cfg;
  apply_config_kv(explicit_cfg, "model.policy", "state-aware");
  apply_config_kv(explicit_cfg, "model.delta", "0.01");
  explicit_cfg.finalize_defaults();
  CHECK(explicit_cfg.policy.delta_mag == 0.01);

  ExperimentConfig standard_cfg;
  standard_cfg.finalize_defaults();
  CHECK(standard_cfg.policy.delta_mag == 0.0);
}

TEST_CASE("output directory resolution prefers cli, env, config, default") {
  ExperimentConfig cfg;
  unsetenv("XBNN_OUT_DIR");
  CHECK(resolve_out_dir(cfg, "") == "out");
  cfg.out_dir = "from-config";
  CHECK(resolve_out_dir(cfg, "") == "from-config");
  setenv("XBNN_OUT_DIR", "from-env", 1);
  CHECK(resolve_out_dir(cfg, "") == "from-env");
  CHECK(resolve_out_dir(cfg, "from-cli") == "from-cli");
  unsetenv("XBNN_OUT_DIR");
}
