#include "xbnn/reporting.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <tuple>

#include <openssl/evp.h>

#include "xbnn/errors.hpp"

namespace xbnn {

namespace {

constexpr double kRegionBand = 1e-9;

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string field;
  while (std::getline(ss, field, ',')) out.push_back(field);
  if (!line.empty() && line.back() == ',') out.push_back("");
  return out;
}

std::vector<std::vector<std::string>> read_csv(const std::string& path,
                                               const std::string& expected_header) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open CSV: " + path);
  std::string line;
  if (!std::getline(is, line)) throw DataError("empty CSV: " + path);
  if (line != expected_header)
    throw DataError(path + ": unexpected header '" + line + "'");
  std::vector<std::vector<std::string>> rows;
  const std::size_t n_cols = split_csv_line(expected_header).size();
  int line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    auto fields = split_csv_line(line);
    if (fields.size() != n_cols)
      throw DataError(path + ": line " + std::to_string(line_no) + " has " +
                      std::to_string(fields.size()) + " fields, expected " +
                      std::to_string(n_cols));
    rows.push_back(std::move(fields));
  }
  return rows;
}

int parse_int(const std::string& s) {
  int v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size())
    throw DataError("bad integer in CSV: '" + s + "'");
  return v;
}

bool parse_bool01(const std::string& s) {
  if (s == "0") return false;
  if (s == "1") return true;
  throw DataError("bad boolean in CSV: '" + s + "'");
}

}  // namespace

std::string format_double(double v) {
  char buf[40];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  if (ec != std::errc()) throw NumericError("double formatting failed");
  return std::string(buf, p);
}

double parse_double(const std::string& s) {
  double v = 0.0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size())
    throw DataError("bad number in CSV: '" + s + "'");
  return v;
}

void atomic_write(const std::string& path, const std::string& content) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("cannot open for writing: " + tmp);
    os.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!os) throw DataError("short write: " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0)
    throw DataError("cannot rename " + tmp + " to " + path);
}

std::string sha256_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open for hashing: " + path);
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (!ctx || EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr) != 1) {
    EVP_MD_CTX_free(ctx);
    throw NumericError("SHA-256 init failed");
  }
  char buf[1 << 16];
  while (is) {
    is.read(buf, sizeof buf);
    const std::streamsize got = is.gcount();
    if (got > 0) EVP_DigestUpdate(ctx, buf, static_cast<std::size_t>(got));
  }
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx, digest, &len);
  EVP_MD_CTX_free(ctx);
  static const char* hex = "0123456789abcdef";
  std::string out;
  out.reserve(2 * len);
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(hex[digest[i] >> 4]);
    out.push_back(hex[digest[i] & 0xf]);
  }
  return out;
}

std::string classify_region(double delta_clean, double delta_adv) {
  if (std::abs(delta_adv + delta_clean) <= kRegionBand ||
      std::abs(delta_adv - delta_clean) <= kRegionBand)
    return "neutral";
  if (delta_adv > -delta_clean) return "favorable";
  if (delta_adv < delta_clean) return "unfavorable";
  return "neutral";
}

double dispersion(const std::vector<RobustnessPoint>& points) {
  double best = 0.0;
  for (std::size_t i = 0; i < points.size(); ++i)
    for (std::size_t j = i + 1; j < points.size(); ++j) {
      const double dx = points[i].delta_clean - points[j].delta_clean;
      const double dy = points[i].delta_adv - points[j].delta_adv;
      best = std::max(best, std::hypot(dx, dy));
    }
  return best;
}

namespace {

constexpr const char* kRobustnessHeader =
    "policy,mapping,size,ratio,attack,mode,epsilon,delta_clean,delta_adv,region,dispersion";

std::string group_key(const RobustnessPoint& p) {
  return p.policy + '|' + to_string(p.mapping) + '|' + std::to_string(p.size) + '|' +
         format_double(p.ratio) + '|' + to_string(p.kind) + '|' + to_string(p.mode);
}

}  // namespace

void write_robustness_csv(const std::string& path,
                          const std::vector<RobustnessPoint>& points) {
  std::map<std::string, std::vector<RobustnessPoint>> groups;
  for (const RobustnessPoint& p : points) groups[group_key(p)].push_back(p);
  std::map<std::string, double> disp;
  for (const auto& [key, group] : groups) disp[key] = dispersion(group);

  std::string out = kRobustnessHeader;
  out += '\n';
  for (const RobustnessPoint& p : points) {
    out += p.policy;
    out += ',';
    out += to_string(p.mapping);
    out += ',';
    out += std::to_string(p.size);
    out += ',';
    out += format_double(p.ratio);
    out += ',';
    out += to_string(p.kind);
    out += ',';
    out += to_string(p.mode);
    out += ',';
    out += format_double(p.epsilon);
    out += ',';
    out += format_double(p.delta_clean);
    out += ',';
    out += format_double(p.delta_adv);
    out += ',';
    out += classify_region(p.delta_clean, p.delta_adv);
    out += ',';
    out += format_double(disp[group_key(p)]);
    out += '\n';
  }
  atomic_write(path, out);
}

std::vector<RobustnessPoint> read_robustness_csv(const std::string& path) {
  std::vector<RobustnessPoint> out;
  for (const auto& f : read_csv(path, kRobustnessHeader)) {
    RobustnessPoint p;
    p.policy = f[0];
    p.mapping = map_mode_from_string(f[1]);
    p.size = parse_int(f[2]);
    p.ratio = parse_double(f[3]);
    p.kind = attack_kind_from_string(f[4]);
    p.mode = attack_mode_from_string(f[5]);
    p.epsilon = parse_double(f[6]);
    p.delta_clean = parse_double(f[7]);
    p.delta_adv = parse_double(f[8]);
    // region (f[9]) and dispersion (f[10]) are derived columns.
    out.push_back(p);
  }
  return out;
}

namespace {
constexpr const char* kPowerHeader =
    "policy,mapping,size,ratio,layer,tiles,mvm_ops,ideal_w,ideal_weights_only_w,nonideal_w";
}

void write_power_csv(const std::string& path, const std::vector<PowerRecord>& records) {
  std::string out = kPowerHeader;
  out += '\n';
  for (const PowerRecord& r : records) {
    out += r.policy;
    out += ',';
    out += to_string(r.mapping);
    out += ',';
    out += std::to_string(r.size);
    out += ',';
    out += format_double(r.ratio);
    out += ',';
    out += std::to_string(r.layer);
    out += ',';
    out += std::to_string(r.tiles);
    out += ',';
    out += format_double(r.mvm_ops);
    out += ',';
    out += format_double(r.ideal_w);
    out += ',';
    out += format_double(r.ideal_weights_only_w);
    out += ',';
    out += format_double(r.nonideal_w);
    out += '\n';
  }
  atomic_write(path, out);
}

std::vector<PowerRecord> read_power_csv(const std::string& path) {
  std::vector<PowerRecord> out;
  for (const auto& f : read_csv(path, kPowerHeader)) {
    PowerRecord r;
    r.policy = f[0];
    r.mapping = map_mode_from_string(f[1]);
    r.size = parse_int(f[2]);
    r.ratio = parse_double(f[3]);
    r.layer = parse_int(f[4]);
    r.tiles = parse_int(f[5]);
    r.mvm_ops = parse_double(f[6]);
    r.ideal_w = parse_double(f[7]);
    r.ideal_weights_only_w = parse_double(f[8]);
    r.nonideal_w = parse_double(f[9]);
    out.push_back(r);
  }
  return out;
}

namespace {
constexpr const char* kNfHeader = "policy,mapping,size,ratio,layer,block_row,block_col,nf";
}

void write_nf_csv(const std::string& path, const std::vector<NfRecord>& records) {
  std::string out = kNfHeader;
  out += '\n';
  for (const NfRecord& r : records) {
    out += r.policy;
    out += ',';
    out += to_string(r.mapping);
    out += ',';
    out += std::to_string(r.size);
    out += ',';
    out += format_double(r.ratio);
    out += ',';
    out += std::to_string(r.layer);
    out += ',';
    out += std::to_string(r.block_row);
    out += ',';
    out += std::to_string(r.block_col);
    out += ',';
    out += format_double(r.nf);
    out += '\n';
  }
  atomic_write(path, out);
}

std::vector<NfRecord> read_nf_csv(const std::string& path) {
  std::vector<NfRecord> out;
  for (const auto& f : read_csv(path, kNfHeader)) {
    NfRecord r;
    r.policy = f[0];
    r.mapping = map_mode_from_string(f[1]);
    r.size = parse_int(f[2]);
    r.ratio = parse_double(f[3]);
    r.layer = parse_int(f[4]);
    r.block_row = parse_int(f[5]);
    r.block_col = parse_int(f[6]);
    r.nf = parse_double(f[7]);
    out.push_back(r);
  }
  return out;
}

namespace {
constexpr const char* kAnsHeader =
    "policy,mapping,size,ratio,attack,mode,epsilon,layer,ans,excluded";
}

void write_ans_csv(const std::string& path, const std::vector<AnsRecord>& records) {
  std::string out = kAnsHeader;
  out += '\n';
  for (const AnsRecord& r : records) {
    out += r.policy;
    out += ',';
    out += to_string(r.mapping);
    out += ',';
    out += std::to_string(r.size);
    out += ',';
    out += format_double(r.ratio);
    out += ',';
    out += to_string(r.kind);
    out += ',';
    out += to_string(r.mode);
    out += ',';
    out += format_double(r.epsilon);
    out += ',';
    out += std::to_string(r.layer);
    out += ',';
    out += format_double(r.ans);
    out += ',';
    out += (r.excluded ? "1" : "0");
    out += '\n';
  }
  atomic_write(path, out);
}

std::vector<AnsRecord> read_ans_csv(const std::string& path) {
  std::vector<AnsRecord> out;
  for (const auto& f : read_csv(path, kAnsHeader)) {
    AnsRecord r;
    r.policy = f[0];
    r.mapping = map_mode_from_string(f[1]);
    r.size = parse_int(f[2]);
    r.ratio = parse_double(f[3]);
    r.kind = attack_kind_from_string(f[4]);
    r.mode = attack_mode_from_string(f[5]);
    r.epsilon = parse_double(f[6]);
    r.layer = parse_int(f[7]);
    r.ans = parse_double(f[8]);
    r.excluded = parse_bool01(f[9]);
    out.push_back(r);
  }
  return out;
}

void write_attack_records_csv(const std::string& path,
                              const std::vector<AttackRecord>& records) {
  std::string out = "sample_id,epsilon,attack,mode,mapping,clean_correct,adv_correct\n";
  for (const AttackRecord& r : records) {
    out += std::to_string(r.sample_id);
    out += ',';
    out += format_double(r.epsilon);
    out += ',';
    out += to_string(r.kind);
    out += ',';
    out += to_string(r.mode);
    out += ',';
    out += to_string(r.mapping);
    out += ',';
    out += (r.clean_correct ? "1" : "0");
    out += ',';
    out += (r.adv_correct ? "1" : "0");
    out += '\n';
  }
  atomic_write(path, out);
}

std::vector<PowerSavings> power_summary(const std::vector<PowerRecord>& records) {
  // Key: policy|size|ratio|layer. Each cell needs exactly one record per
  // mapping mode; totals get layer id -1.
  struct Cell {
    const PowerRecord* normal = nullptr;
    const PowerRecord* switched = nullptr;
  };
  std::map<std::tuple<std::string, int, double, int>, Cell> cells;
  for (const PowerRecord& r : records) {
    Cell& c = cells[{r.policy, r.size, r.ratio, r.layer}];
    const PowerRecord*& slot = r.mapping == MapMode::Normal ? c.normal : c.switched;
    if (slot)
      throw DataError("duplicate power record for policy=" + r.policy + " layer=" +
                      std::to_string(r.layer));
    slot = &r;
  }

  std::map<std::tuple<std::string, int, double>, std::pair<PowerRecord, PowerRecord>> totals;
  std::vector<PowerSavings> out;
  for (const auto& [key, cell] : cells) {
    if (!cell.normal || !cell.switched)
      throw DataError("unpaired power records: need both mappings for policy=" +
                      std::get<0>(key) + " size=" + std::to_string(std::get<1>(key)) +
                      " layer=" + std::to_string(std::get<3>(key)));
    PowerSavings s;
    s.policy = std::get<0>(key);
    s.size = std::get<1>(key);
    s.ratio = std::get<2>(key);
    s.layer = std::get<3>(key);
    if (cell.normal->ideal_w <= 0.0 || cell.normal->nonideal_w <= 0.0)
      throw DataError("power record with non-positive baseline power");
    s.saving_ideal = 1.0 - cell.switched->ideal_w / cell.normal->ideal_w;
    s.saving_nonideal = 1.0 - cell.switched->nonideal_w / cell.normal->nonideal_w;
    out.push_back(s);

    auto& [tn, ts] = totals[{s.policy, s.size, s.ratio}];
    tn.ideal_w += cell.normal->ideal_w;
    tn.nonideal_w += cell.normal->nonideal_w;
    ts.ideal_w += cell.switched->ideal_w;
    ts.nonideal_w += cell.switched->nonideal_w;
  }
  for (const auto& [key, pair] : totals) {
    PowerSavings s;
    s.policy = std::get<0>(key);
    s.size = std::get<1>(key);
    s.ratio = std::get<2>(key);
    s.layer = -1;
    s.saving_ideal = 1.0 - pair.second.ideal_w / pair.first.ideal_w;
    s.saving_nonideal = 1.0 - pair.second.nonideal_w / pair.first.nonideal_w;
    out.push_back(s);
  }
  return out;
}

void write_power_savings_csv(const std::string& path, const std::vector<PowerSavings>& rows) {
  std::string out = "policy,size,ratio,layer,saving_ideal,saving_nonideal\n";
  for (const PowerSavings& s : rows) {
    out += s.policy;
    out += ',';
    out += std::to_string(s.size);
    out += ',';
    out += format_double(s.ratio);
    out += ',';
    out += std::to_string(s.layer);
    out += ',';
    out += format_double(s.saving_ideal);
    out += ',';
    out += format_double(s.saving_nonideal);
    out += '\n';
  }
  atomic_write(path, out);
}

double quantile(std::vector<double> values, double p) {
  if (values.empty()) throw DataError("quantile of an empty set");
  std::sort(values.begin(), values.end());
  const double h = (static_cast<double>(values.size()) - 1.0) * p;
  const std::size_t lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = static_cast<std::size_t>(std::ceil(h));
  return values[lo] + (h - std::floor(h)) * (values[hi] - values[lo]);
}

std::vector<NfSummaryRow> nf_summary(const std::vector<NfRecord>& records) {
  if (records.empty()) throw DataError("nf_summary over an empty record set");
  std::map<std::tuple<std::string, std::string, int, double>, std::vector<double>> cells;
  for (const NfRecord& r : records)
    cells[{r.policy, to_string(r.mapping), r.size, r.ratio}].push_back(r.nf);

  std::vector<NfSummaryRow> out;
  for (auto& [key, values] : cells) {
    NfSummaryRow row;
    row.policy = std::get<0>(key);
    row.mapping = map_mode_from_string(std::get<1>(key));
    row.size = std::get<2>(key);
    row.ratio = std::get<3>(key);
    row.count = static_cast<int>(values.size());
    row.min = quantile(values, 0.0);
    row.q1 = quantile(values, 0.25);
    row.median = quantile(values, 0.5);
    row.q3 = quantile(values, 0.75);
    row.max = quantile(values, 1.0);
    out.push_back(row);
  }
  return out;
}

void write_nf_summary_csv(const std::string& path, const std::vector<NfSummaryRow>& rows) {
  std::string out = "policy,mapping,size,ratio,count,min,q1,median,q3,max\n";
  for (const NfSummaryRow& r : rows) {
    out += r.policy;
    out += ',';
    out += to_string(r.mapping);
    out += ',';
    out += std::to_string(r.size);
    out += ',';
    out += format_double(r.ratio);
    out += ',';
    out += std::to_string(r.count);
    out += ',';
    out += format_double(r.min);
    out += ',';
    out += format_double(r.q1);
    out += ',';
    out += format_double(r.median);
    out += ',';
    out += format_double(r.q3);
    out += ',';
    out += format_double(r.max);
    out += '\n';
  }
  atomic_write(path, out);
}

}  // namespace xbnn
