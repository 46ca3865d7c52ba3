// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "robustlab/tensor.hpp"

namespace robustlab {

/// Labeled image set, pixels in [0,1], labels in [0, num_classes).
struct ImageSet {
  int channels = 0, height = 0, width = 0;
  int num_classes = 0;
  std::vector<double> pixels;  // n * channels * height * width, row-major
  std::vector<int> labels;

  int size() const { return static_cast<int>(labels.size()); }
  std::int64_t example_size() const {
    return static_cast<std::int64_t>(channels) * height * width;
  }
};

struct Dataset {
  ImageSet train;
  ImageSet test;
  std::optional<ImageSet> extra;
  int num_classes() const { return train.num_classes; }
};

/// Batch tensor [B,C,H,W] + labels for the given example indices.
Tensor batch_images(const ImageSet& set, const std::vector<int>& idx);
std::vector<int> batch_labels(const ImageSet& set, const std::vector<int>& idx);

/// Two-class grayscale blobs: class 0 brightens the top-left quadrant,
/// class 1 the bottom-right, plus Gaussian noise clamped to [0,1].
/// Deterministic per seed; 80/20 train/test split; the optional extra pool is
/// drawn from the same stream after the first n samples, so it is disjoint
/// from train/test by index range.
Dataset gen_blobs(int n, int image_size, double noise_sigma,
                  std::uint64_t seed, int extra_n = 0);

/// CIFAR-10 binary batches: records of 1 label byte + 3072 pixel bytes
/// (full red plane, then green, then blue, 32x32 row-major), pixels / 255.
ImageSet load_cifar10_records(const std::string& path);
Dataset load_cifar10_binary(const std::vector<std::string>& train_paths,
                            const std::string& test_path);

/// Same record layout for arbitrary dims; grayscale is stored as 3 identical
/// planes. Round-trips written by write_records are byte-identical.
void write_records(const ImageSet& set, const std::string& path);
ImageSet read_records(const std::string& path, int channels, int height,
                      int width, int num_classes);

/// Directory persistence: meta.json + train.bin/test.bin(/extra.bin).
void save_dataset(const Dataset& ds, const std::string& dir);
Dataset load_dataset(const std::string& dir);

}  // namespace robustlab
