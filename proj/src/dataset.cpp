#include "xbnn/dataset.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <sstream>

#include "xbnn/errors.hpp"
#include "xbnn/rng.hpp"

namespace xbnn {

namespace {

void check_geometry(int channels, int height, int width, int num_classes) {
  if (channels <= 0 || height <= 0 || width <= 0)
    throw ConfigError("dataset geometry must be positive");
  if (num_classes <= 0) throw ConfigError("dataset class count must be positive");
}

double parse_pixel(const std::string& field, int line_no, int col) {
  double v = 0.0;
  const char* b = field.data();
  const char* e = b + field.size();
  auto [p, ec] = std::from_chars(b, e, v);
  if (ec != std::errc() || p != e)
    throw DataError("line " + std::to_string(line_no) + ": field " + std::to_string(col) +
                    " is not a number: '" + field + "'");
  return v;
}

Dataset ingest_csv(const std::string& path, int channels, int height, int width,
                   int num_classes) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open dataset: " + path);
  const int pixels = channels * height * width;

  std::vector<double> pix;
  std::vector<int> labels;
  std::string line;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string field;
    int col = 0;
    while (std::getline(ss, field, ',')) {
      if (col == 0) {
        const double lv = parse_pixel(field, line_no, col);
        const int label = static_cast<int>(lv);
        if (lv != label || label < 0 || label >= num_classes)
          throw DataError("line " + std::to_string(line_no) + ": label " + field +
                          " outside [0," + std::to_string(num_classes) + ")");
        labels.push_back(label);
      } else {
        const double v = parse_pixel(field, line_no, col);
        if (v < 0.0 || v > 1.0)
          throw DataError("line " + std::to_string(line_no) + ": pixel " +
                          std::to_string(col - 1) + " out of [0,1]: " + field);
        pix.push_back(v);
      }
      ++col;
    }
    if (col != pixels + 1)
      throw DataError("line " + std::to_string(line_no) + ": has " + std::to_string(col) +
                      " fields, expected " + std::to_string(pixels + 1) +
                      " (label + " + std::to_string(pixels) + " pixels)");
  }
  if (labels.empty()) throw DataError("dataset is empty: " + path);

  Dataset data;
  data.num_classes = num_classes;
  data.labels = std::move(labels);
  data.images = Tensor({static_cast<int>(data.labels.size()), channels, height, width});
  std::copy(pix.begin(), pix.end(), data.images.data());
  return data;
}

std::uint32_t read_be32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) |
         (std::uint32_t(b[2]) << 8) | std::uint32_t(b[3]);
}

void write_be32(std::ostream& os, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v >> 24),
                              static_cast<unsigned char>(v >> 16),
                              static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

std::vector<unsigned char> read_idx_u8(const std::string& path, std::vector<int>& dims) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open dataset: " + path);
  const std::uint32_t magic = read_be32(is);
  if (!is || (magic & 0xffffff00u) != 0x00000800u)
    throw DataError("not an IDX u8 file (bad magic): " + path);
  const int ndims = static_cast<int>(magic & 0xffu);
  if (ndims < 1 || ndims > 4) throw DataError("unsupported IDX rank " + std::to_string(ndims));
  std::size_t total = 1;
  dims.clear();
  for (int d = 0; d < ndims; ++d) {
    const std::uint32_t v = read_be32(is);
    if (!is) throw DataError("truncated IDX header: " + path);
    dims.push_back(static_cast<int>(v));
    total *= v;
  }
  std::vector<unsigned char> bytes(total);
  is.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(total));
  const std::size_t got = static_cast<std::size_t>(is.gcount());
  if (got != total)
    throw DataError(path + ": truncated IDX payload, expected " + std::to_string(total) +
                    " bytes, got " + std::to_string(got));
  return bytes;
}

std::string sibling_labels_path(const std::string& images_path) {
  const std::size_t pos = images_path.rfind("images");
  if (pos == std::string::npos)
    throw DataError("idx-binary images path must contain 'images' (labels are the sibling): " +
                    images_path);
  std::string p = images_path;
  p.replace(pos, 6, "labels");
  return p;
}

Dataset ingest_idx(const std::string& path, int channels, int height, int width,
                   int num_classes) {
  std::vector<int> idims;
  const std::vector<unsigned char> ibytes = read_idx_u8(path, idims);
  int n = 0;
  if (idims.size() == 3 && channels == 1) {
    n = idims[0];
    if (idims[1] != height || idims[2] != width)
      throw DataError(path + ": IDX image size " + std::to_string(idims[1]) + "x" +
                      std::to_string(idims[2]) + " does not match configured " +
                      std::to_string(height) + "x" + std::to_string(width));
  } else if (idims.size() == 4) {
    n = idims[0];
    if (idims[1] != channels || idims[2] != height || idims[3] != width)
      throw DataError(path + ": IDX tensor shape does not match configured geometry");
  } else {
    throw DataError(path + ": IDX rank " + std::to_string(idims.size()) +
                    " incompatible with channel count " + std::to_string(channels));
  }
  if (n <= 0) throw DataError("dataset is empty: " + path);

  std::vector<int> ldims;
  const std::string lpath = sibling_labels_path(path);
  const std::vector<unsigned char> lbytes = read_idx_u8(lpath, ldims);
  if (ldims.size() != 1 || ldims[0] != n)
    throw DataError(lpath + ": label count does not match " + std::to_string(n) + " images");

  Dataset data;
  data.num_classes = num_classes;
  data.images = Tensor({n, channels, height, width});
  for (std::size_t i = 0; i < ibytes.size(); ++i)
    data.images[i] = static_cast<double>(ibytes[i]) / 255.0;
  data.labels.resize(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const int label = lbytes[static_cast<std::size_t>(i)];
    if (label >= num_classes)
      throw DataError(lpath + ": label " + std::to_string(label) + " at index " +
                      std::to_string(i) + " outside [0," + std::to_string(num_classes) + ")");
    data.labels[static_cast<std::size_t>(i)] = label;
  }
  return data;
}

void append_double(std::string& line, double v) {
  char buf[32];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  line.append(buf, p);
}

}  // namespace

DataFormat data_format_from_string(const std::string& s) {
  if (s == "csv-rows") return DataFormat::CsvRows;
  if (s == "idx-binary") return DataFormat::IdxBinary;
  throw ConfigError("unknown dataset format '" + s + "' (csv-rows or idx-binary)");
}

std::string to_string(DataFormat f) {
  return f == DataFormat::CsvRows ? "csv-rows" : "idx-binary";
}

Dataset ingest_dataset(const std::string& path, DataFormat format, int channels, int height,
                       int width, int num_classes) {
  check_geometry(channels, height, width, num_classes);
  return format == DataFormat::CsvRows ? ingest_csv(path, channels, height, width, num_classes)
                                       : ingest_idx(path, channels, height, width, num_classes);
}

void write_dataset_csv(const Dataset& data, const std::string& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw DataError("cannot open for writing: " + path);
  const int n = data.size();
  const std::size_t pixels = data.images.size() / static_cast<std::size_t>(n);
  std::string line;
  for (int i = 0; i < n; ++i) {
    line.clear();
    line += std::to_string(data.labels[static_cast<std::size_t>(i)]);
    const double* px = data.images.data() + static_cast<std::size_t>(i) * pixels;
    for (std::size_t p = 0; p < pixels; ++p) {
      line += ',';
      append_double(line, px[p]);
    }
    line += '\n';
    os << line;
  }
  if (!os) throw DataError("short write: " + path);
}

void write_dataset_idx(const Dataset& data, const std::string& images_path) {
  const std::string labels_path = sibling_labels_path(images_path);
  const int n = data.size();
  {
    std::ofstream os(images_path, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("cannot open for writing: " + images_path);
    const bool gray = data.images.dim(1) == 1;
    write_be32(os, 0x00000800u | (gray ? 3u : 4u));
    write_be32(os, static_cast<std::uint32_t>(n));
    if (!gray) write_be32(os, static_cast<std::uint32_t>(data.images.dim(1)));
    write_be32(os, static_cast<std::uint32_t>(data.images.dim(2)));
    write_be32(os, static_cast<std::uint32_t>(data.images.dim(3)));
    std::vector<unsigned char> bytes(data.images.size());
    for (std::size_t i = 0; i < bytes.size(); ++i) {
      const double v = data.images[i] * 255.0;
      const long r = std::lround(v);
      if (std::abs(v - static_cast<double>(r)) > 1e-9)
        throw DataError("pixel is not an exact multiple of 1/255; IDX export would lose it");
      bytes[i] = static_cast<unsigned char>(r);
    }
    os.write(reinterpret_cast<const char*>(bytes.data()),
             static_cast<std::streamsize>(bytes.size()));
    if (!os) throw DataError("short write: " + images_path);
  }
  {
    std::ofstream os(labels_path, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("cannot open for writing: " + labels_path);
    write_be32(os, 0x00000801u);
    write_be32(os, static_cast<std::uint32_t>(n));
    for (int i = 0; i < n; ++i) {
      const unsigned char b = static_cast<unsigned char>(data.labels[static_cast<std::size_t>(i)]);
      os.write(reinterpret_cast<const char*>(&b), 1);
    }
    if (!os) throw DataError("short write: " + labels_path);
  }
}

std::uint64_t dataset_hash(const Dataset& data) {
  std::uint64_t h = 0x9e3779b97f4a7c15ull;
  for (int d : data.images.shape()) h = mix_key(h, static_cast<std::uint64_t>(d));
  for (std::size_t i = 0; i < data.images.size(); ++i) {
    const double v = data.images[i];
    std::uint64_t bits;
    static_assert(sizeof bits == sizeof(double));
    std::memcpy(&bits, &v, sizeof bits);
    h = mix_key(h, bits);
  }
  for (int label : data.labels) h = mix_key(h, static_cast<std::uint64_t>(label));
  return mix_key(h, static_cast<std::uint64_t>(data.num_classes));
}

Tensor select_images(const Dataset& data, const std::vector<int>& indices) {
  std::vector<int> shape = data.images.shape();
  shape[0] = static_cast<int>(indices.size());
  Tensor out(shape);
  const std::size_t stride = data.images.size() / static_cast<std::size_t>(data.size());
  for (std::size_t k = 0; k < indices.size(); ++k)
    std::copy(data.images.data() + static_cast<std::size_t>(indices[k]) * stride,
              data.images.data() + (static_cast<std::size_t>(indices[k]) + 1) * stride,
              out.data() + k * stride);
  return out;
}

std::vector<int> select_labels(const Dataset& data, const std::vector<int>& indices) {
  std::vector<int> out(indices.size());
  for (std::size_t k = 0; k < indices.size(); ++k)
    out[k] = data.labels[static_cast<std::size_t>(indices[k])];
  return out;
}

Dataset head(const Dataset& data, int n) {
  if (n <= 0 || n > data.size()) throw DataError("head size out of range");
  std::vector<int> idx(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
  Dataset out;
  out.images = select_images(data, idx);
  out.labels = select_labels(data, idx);
  out.num_classes = data.num_classes;
  return out;
}

Dataset synthetic_gratings(const GratingSpec& spec) {
  if (spec.per_class <= 0 || spec.classes <= 0 || spec.size <= 0 || spec.noise < 0.0)
    throw ConfigError("grating corpus parameters must be positive (noise >= 0)");
  Dataset data;
  data.num_classes = spec.classes;
  const int n = spec.per_class * spec.classes;
  data.images = Tensor({n, 1, spec.size, spec.size});
  data.labels.resize(static_cast<std::size_t>(n));

  int idx = 0;
  for (int k = 0; k < spec.classes; ++k) {
    const double theta = std::numbers::pi * static_cast<double>(k) / spec.classes;
    const double freq = 2.0 + static_cast<double>(k % 3);
    const double level = 0.35 + 0.3 * static_cast<double>(k % 5) / 4.0;
    const double cx = std::cos(theta), sx = std::sin(theta);
    for (int s = 0; s < spec.per_class; ++s, ++idx) {
      RandomStream rs(spec.seed, stream_tag("fixture"), spec.split_tag,
                      static_cast<std::uint64_t>(k), static_cast<std::uint64_t>(s));
      const double phase = rs.next_uniform(0.0, 2.0 * std::numbers::pi);
      data.labels[static_cast<std::size_t>(idx)] = k;
      for (int y = 0; y < spec.size; ++y)
        for (int x = 0; x < spec.size; ++x) {
          const double u = (cx * x + sx * y) / static_cast<double>(spec.size);
          double v = level + 0.3 * std::sin(2.0 * std::numbers::pi * freq * u + phase) +
                     spec.noise * rs.next_gaussian();
          v = std::clamp(v, 0.0, 1.0);
          v = std::round(v * 255.0) / 255.0;
          data.images.at(idx, 0, y, x) = v;
        }
    }
  }
  return data;
}

}  // namespace xbnn
