#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "xbnn/tensor.hpp"

namespace xbnn {

// Labeled image set. Pixels live in [0,1]; labels in [0, num_classes).
struct Dataset {
  Tensor images;  // (N, C, H, W)
  std::vector<int> labels;
  int num_classes = 0;

  int size() const { return images.empty() ? 0 : images.dim(0); }
};

enum class DataFormat { CsvRows, IdxBinary };

DataFormat data_format_from_string(const std::string& s);
std::string to_string(DataFormat f);

// csv-rows: one sample per line, "label,p0,p1,..." row-major pixels.
// idx-binary: IDX u8 tensor (magic 0x00 0x00 0x08 ndims, big-endian dims);
// images are (N,H,W) or (N,C,H,W), pixel = byte/255; labels live in a
// sibling file derived by replacing "images" with "labels" in the filename.
Dataset ingest_dataset(const std::string& path, DataFormat format, int channels, int height,
                       int width, int num_classes);

// Writers, used by the fixture generator and the format round-trip tests.
// CSV doubles are printed with shortest round-trip formatting, so a dataset
// whose pixels are exact multiples of 1/255 survives csv <-> idx bit-exactly.
void write_dataset_csv(const Dataset& data, const std::string& path);
void write_dataset_idx(const Dataset& data, const std::string& images_path);

// Order- and content-sensitive digest over pixels, labels and shape.
std::uint64_t dataset_hash(const Dataset& data);

// Synthetic grayscale corpus: oriented sinusoidal gratings with per-class
// orientation, frequency and background level, random phase and additive
// Gaussian noise, quantized to the byte grid (so csv and idx exports carry
// identical values). split_tag distinguishes train (0) from test (1) draws
// under one seed. Deterministic for fixed parameters.
struct GratingSpec {
  int per_class = 60;
  int classes = 10;
  int size = 16;
  double noise = 0.06;
  std::uint64_t seed = 7;
  std::uint64_t split_tag = 0;
};
Dataset synthetic_gratings(const GratingSpec& spec);

Tensor select_images(const Dataset& data, const std::vector<int>& indices);
std::vector<int> select_labels(const Dataset& data, const std::vector<int>& indices);

// First n samples (n <= size) as a contiguous batch.
Dataset head(const Dataset& data, int n);

}  // namespace xbnn
