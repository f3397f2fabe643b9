#pragma once

#include <string>
#include <vector>

#include "xbnn/attacks.hpp"
#include "xbnn/mapping.hpp"

namespace xbnn {

// One point of a robustness map: accuracy deltas of a mapped configuration
// against the software baseline, in percentage points, at one attack budget.
struct RobustnessPoint {
  std::string policy;  // binarization policy tag
  MapMode mapping = MapMode::Normal;
  int size = 0;        // crossbar rows/cols
  double ratio = 0.0;  // device on/off ratio
  AttackKind kind = AttackKind::Fgsm;
  AttackMode mode = AttackMode::SH;
  double epsilon = 0.0;
  double delta_clean = 0.0;  // mapped clean acc - software clean acc
  double delta_adv = 0.0;    // mapped adv acc - software adv acc
};

// favorable: delta_adv > -delta_clean; unfavorable: delta_adv < delta_clean;
// neutral otherwise. Points within 1e-9 of either boundary are neutral.
std::string classify_region(double delta_clean, double delta_adv);

// Max pairwise Euclidean distance between (delta_clean, delta_adv) points —
// how tightly an epsilon sweep clusters.
double dispersion(const std::vector<RobustnessPoint>& points);

// robustness_map.csv: one row per point, region label and the per-
// configuration dispersion attached. Grouping key for dispersion:
// (policy, mapping, size, ratio, kind, mode).
void write_robustness_csv(const std::string& path, const std::vector<RobustnessPoint>& points);
std::vector<RobustnessPoint> read_robustness_csv(const std::string& path);

struct PowerRecord {
  std::string policy;
  MapMode mapping = MapMode::Normal;
  int size = 0;
  double ratio = 0.0;
  int layer = 0;
  int tiles = 0;
  double mvm_ops = 0.0;
  double ideal_w = 0.0;
  double ideal_weights_only_w = 0.0;
  double nonideal_w = 0.0;
};

void write_power_csv(const std::string& path, const std::vector<PowerRecord>& records);
std::vector<PowerRecord> read_power_csv(const std::string& path);

struct NfRecord {
  std::string policy;
  MapMode mapping = MapMode::Normal;
  int size = 0;
  double ratio = 0.0;
  int layer = 0;
  int block_row = 0;
  int block_col = 0;
  double nf = 0.0;
};

void write_nf_csv(const std::string& path, const std::vector<NfRecord>& records);
std::vector<NfRecord> read_nf_csv(const std::string& path);

struct AnsRecord {
  std::string policy;
  MapMode mapping = MapMode::Normal;
  int size = 0;
  double ratio = 0.0;
  AttackKind kind = AttackKind::Fgsm;
  AttackMode mode = AttackMode::SH;
  double epsilon = 0.0;
  int layer = 0;
  double ans = 0.0;
  bool excluded = false;  // clean activation norm was zero
};

void write_ans_csv(const std::string& path, const std::vector<AnsRecord>& records);
std::vector<AnsRecord> read_ans_csv(const std::string& path);

void write_attack_records_csv(const std::string& path, const std::vector<AttackRecord>& records);

// Savings of switchx relative to normal mapping, 1 - P_switchx/P_normal,
// from paired records (same policy/size/ratio/layer under both mappings).
// layer = -1 carries the whole-model total.
struct PowerSavings {
  std::string policy;
  int size = 0;
  double ratio = 0.0;
  int layer = 0;
  double saving_ideal = 0.0;
  double saving_nonideal = 0.0;
};

std::vector<PowerSavings> power_summary(const std::vector<PowerRecord>& records);
void write_power_savings_csv(const std::string& path, const std::vector<PowerSavings>& rows);

// Five-number summary per (policy, mapping, size, ratio) cell.
struct NfSummaryRow {
  std::string policy;
  MapMode mapping = MapMode::Normal;
  int size = 0;
  double ratio = 0.0;
  int count = 0;
  double min = 0.0, q1 = 0.0, median = 0.0, q3 = 0.0, max = 0.0;
};

std::vector<NfSummaryRow> nf_summary(const std::vector<NfRecord>& records);
void write_nf_summary_csv(const std::string& path, const std::vector<NfSummaryRow>& rows);

// Quantile with linear interpolation between order statistics (h = (n-1)p).
double quantile(std::vector<double> values, double p);

// Shortest round-trip decimal formatting shared by every CSV writer; parsing
// it back and re-emitting reproduces the bytes exactly.
std::string format_double(double v);
double parse_double(const std::string& s);

// All writers go through temp-file + rename so partial output never lands
// under the final name.
void atomic_write(const std::string& path, const std::string& content);

// Streaming SHA-256 of a file, hex-encoded; stamps checkpoints in manifests.
std::string sha256_file(const std::string& path);

}  // namespace xbnn
