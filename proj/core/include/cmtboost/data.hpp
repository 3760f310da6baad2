#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "cmtboost/tensor.hpp"

namespace cmtboost {

/// One labeled image. Pixels are [C,H,W] in [0,1]; label 0 = benign,
/// 1 = malignant.
struct ImageRecord {
  std::string id;
  Tensor<float> pixels;
  int label = 0;
  std::string source;
};

struct DatasetSplit {
  std::vector<ImageRecord> train;
  std::vector<ImageRecord> validation;
  std::vector<ImageRecord> test;
  std::array<double, 3> fractions{0.70, 0.10, 0.20};
  std::uint64_t seed = 0;
};

struct AugmentationSpec {
  double horizontal_flip_prob = 0.5;
  double vertical_flip_prob = 0.5;  // "reflection"
  std::array<double, 2> scale_range{0.9, 1.1};
  std::array<double, 2> shear_range_deg{-10.0, 10.0};
};

struct SyntheticSpec {
  std::size_t count_per_class = 32;
  std::size_t size = 64;
  double noise_level = 0.08;
  std::uint64_t seed = 1;
};

/// Loads `root/benign/*.png` and `root/malignant/*.png` (8-bit grayscale) in
/// lexicographic id order. Unreadable files throw DataError unless permissive,
/// in which case they are reported to stderr and skipped.
std::vector<ImageRecord> load_dataset(const std::string& root_dir, bool permissive = false);

/// Writes records back out as the same directory layout (ids are
/// "benign/<stem>" / "malignant/<stem>").
void write_dataset_png(const std::string& root_dir, const std::vector<ImageRecord>& records);

/// Catmull-Rom bicubic (a = -0.5), half-pixel centers, edge-clamped sampling;
/// output clamped to [0,1].
Tensor<float> resize_bicubic(const Tensor<float>& img, std::size_t out_h, std::size_t out_w);

/// 3x3 median with replicate padding, per channel.
Tensor<float> median_filter_3x3(const Tensor<float>& img);

/// Median filter at native resolution, then bicubic resize to the target.
std::vector<ImageRecord> preprocess_records(std::vector<ImageRecord> records, std::size_t out_h,
                                            std::size_t out_w);

/// Stratified per-class seeded shuffle, contiguous slicing, largest-remainder
/// rounding (ties broken train > validation > test).
DatasetSplit split_dataset(const std::vector<ImageRecord>& records,
                           std::array<double, 3> fractions, std::uint64_t seed);

/// Samples flip/scale/shear from the spec and applies them as one affine warp
/// about the image center with bilinear resampling and replicate borders.
ImageRecord augment(const ImageRecord& rec, const AugmentationSpec& spec, std::uint64_t draw_seed);

/// Two-class synthetic ultrasound-like set: benign = smooth low-eccentricity
/// ellipse with a soft boundary, malignant = irregular spiculated blob with a
/// sharper, rougher boundary; both under multiplicative speckle. Balanced and
/// deterministic given the seed.
std::vector<ImageRecord> generate_synthetic(const SyntheticSpec& spec);

/// CSV manifest `id,label,split`.
void write_split_manifest(const std::string& path, const DatasetSplit& split);

}  // namespace cmtboost
