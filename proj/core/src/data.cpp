#include "cmtboost/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "cmtboost/image_io.hpp"
#include "cmtboost/rng.hpp"

namespace fs = std::filesystem;

namespace cmtboost {

namespace {

constexpr const char* kClassDirs[2] = {"benign", "malignant"};

Tensor<float> image_to_tensor(const GrayImage& img) {
  std::vector<float> v(img.pixels.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<float>(img.pixels[i]) / 255.0f;
  return Tensor<float>::from_data({1, img.height, img.width}, std::move(v));
}

GrayImage tensor_to_image(const Tensor<float>& t) {
  GrayImage img;
  img.height = t.dim(1);
  img.width = t.dim(2);
  img.pixels.resize(img.height * img.width);
  const auto& v = t.data();
  for (std::size_t i = 0; i < img.pixels.size(); ++i) {
    const float x = std::clamp(v[i], 0.0f, 1.0f);
    img.pixels[i] = static_cast<std::uint8_t>(std::lround(x * 255.0f));
  }
  return img;
}

}  // namespace

std::vector<ImageRecord> load_dataset(const std::string& root_dir, bool permissive) {
  std::vector<ImageRecord> records;
  for (int label = 0; label < 2; ++label) {
    const fs::path dir = fs::path(root_dir) / kClassDirs[label];
    if (!fs::is_directory(dir)) {
      throw DataError("missing dataset subdirectory: " + dir.string());
    }
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(dir)) {
      if (entry.is_regular_file() && entry.path().extension() == ".png") {
        files.push_back(entry.path());
      }
    }
    std::sort(files.begin(), files.end());
    for (const auto& file : files) {
      ImageRecord rec;
      rec.id = std::string(kClassDirs[label]) + "/" + file.stem().string();
      rec.label = label;
      rec.source = file.string();
      try {
        rec.pixels = image_to_tensor(read_png_gray(file.string()));
      } catch (const DataError& e) {
        if (!permissive) throw;
        std::cerr << "skipping unreadable image: " << e.what() << "\n";
        continue;
      }
      records.push_back(std::move(rec));
    }
  }
  if (records.empty()) throw DataError("empty dataset under " + root_dir);
  std::sort(records.begin(), records.end(),
            [](const ImageRecord& a, const ImageRecord& b) { return a.id < b.id; });
  return records;
}

void write_dataset_png(const std::string& root_dir, const std::vector<ImageRecord>& records) {
  for (int label = 0; label < 2; ++label) {
    fs::create_directories(fs::path(root_dir) / kClassDirs[label]);
  }
  for (const auto& rec : records) {
    fs::path out = fs::path(root_dir) / (rec.id + ".png");
    write_png_gray(out.string(), tensor_to_image(rec.pixels));
  }
}

namespace {

// Catmull-Rom kernel, a = -0.5.
double cubic_weight(double t) {
  t = std::abs(t);
  if (t <= 1.0) return (1.5 * t - 2.5) * t * t + 1.0;
  if (t < 2.0) return ((-0.5 * t + 2.5) * t - 4.0) * t + 2.0;
  return 0.0;
}

}  // namespace

Tensor<float> resize_bicubic(const Tensor<float>& img, std::size_t out_h, std::size_t out_w) {
  if (img.rank() != 3) throw DimensionError("resize_bicubic: expected [C,H,W] image");
  const std::size_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
  if (h < 2 || w < 2) throw DimensionError("resize_bicubic: input must be at least 2x2");
  if (out_h < 1 || out_w < 1) throw ParameterError("resize_bicubic: non-positive target dims");

  const double sy = static_cast<double>(h) / static_cast<double>(out_h);
  const double sx = static_cast<double>(w) / static_cast<double>(out_w);
  Tensor<float> out({c, out_h, out_w});
  auto& ov = out.data();
  const auto& iv = img.data();
  for (std::size_t ci = 0; ci < c; ++ci) {
    const float* plane = iv.data() + ci * h * w;
    for (std::size_t oy = 0; oy < out_h; ++oy) {
      const double src_y = (static_cast<double>(oy) + 0.5) * sy - 0.5;
      const long y0 = static_cast<long>(std::floor(src_y));
      for (std::size_t ox = 0; ox < out_w; ++ox) {
        const double src_x = (static_cast<double>(ox) + 0.5) * sx - 0.5;
        const long x0 = static_cast<long>(std::floor(src_x));
        double acc = 0.0;
        for (long dy = -1; dy <= 2; ++dy) {
          const long yy = std::clamp(y0 + dy, 0L, static_cast<long>(h) - 1);
          const double wy = cubic_weight(src_y - static_cast<double>(y0 + dy));
          for (long dx = -1; dx <= 2; ++dx) {
            const long xx = std::clamp(x0 + dx, 0L, static_cast<long>(w) - 1);
            const double wx = cubic_weight(src_x - static_cast<double>(x0 + dx));
            acc += wy * wx * static_cast<double>(plane[yy * static_cast<long>(w) + xx]);
          }
        }
        ov[(ci * out_h + oy) * out_w + ox] = static_cast<float>(std::clamp(acc, 0.0, 1.0));
      }
    }
  }
  return out;
}

Tensor<float> median_filter_3x3(const Tensor<float>& img) {
  if (img.rank() != 3) throw DimensionError("median_filter_3x3: expected [C,H,W] image");
  const std::size_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
  Tensor<float> out(img.shape());
  auto& ov = out.data();
  const auto& iv = img.data();
  float window[9];
  for (std::size_t ci = 0; ci < c; ++ci) {
    const float* plane = iv.data() + ci * h * w;
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        int k = 0;
        for (int dy = -1; dy <= 1; ++dy) {
          const std::size_t yy = static_cast<std::size_t>(
              std::clamp<long>(static_cast<long>(y) + dy, 0, static_cast<long>(h) - 1));
          for (int dx = -1; dx <= 1; ++dx) {
            const std::size_t xx = static_cast<std::size_t>(
                std::clamp<long>(static_cast<long>(x) + dx, 0, static_cast<long>(w) - 1));
            window[k++] = plane[yy * w + xx];
          }
        }
        std::nth_element(window, window + 4, window + 9);
        ov[(ci * h + y) * w + x] = window[4];
      }
    }
  }
  return out;
}

std::vector<ImageRecord> preprocess_records(std::vector<ImageRecord> records, std::size_t out_h,
                                            std::size_t out_w) {
  for (auto& rec : records) {
    rec.pixels = resize_bicubic(median_filter_3x3(rec.pixels), out_h, out_w);
  }
  return records;
}

DatasetSplit split_dataset(const std::vector<ImageRecord>& records,
                           std::array<double, 3> fractions, std::uint64_t seed) {
  const double total = fractions[0] + fractions[1] + fractions[2];
  if (std::abs(total - 1.0) > 1e-9) {
    throw ParameterError("split_dataset: fractions must sum to 1");
  }
  DatasetSplit split;
  split.fractions = fractions;
  split.seed = seed;
  for (int label = 0; label < 2; ++label) {
    std::vector<const ImageRecord*> cls;
    for (const auto& rec : records) {
      if (rec.label == label) cls.push_back(&rec);
    }
    if (cls.empty()) {
      throw DataError(std::string("split_dataset: no records for class ") + kClassDirs[label]);
    }
    auto rng = make_rng(mix_seed(seed, static_cast<std::uint64_t>(label)));
    std::shuffle(cls.begin(), cls.end(), rng);

    const std::size_t n = cls.size();
    std::array<std::size_t, 3> counts;
    std::array<double, 3> fracpart;
    std::size_t assigned = 0;
    for (int i = 0; i < 3; ++i) {
      const double target = fractions[i] * static_cast<double>(n);
      counts[i] = static_cast<std::size_t>(std::floor(target));
      fracpart[i] = target - std::floor(target);
      assigned += counts[i];
    }
    // Largest remainder; ties go to the earlier split (train, val, test).
    std::array<int, 3> order{0, 1, 2};
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return fracpart[a] > fracpart[b]; });
    for (std::size_t leftover = n - assigned, i = 0; i < leftover; ++i) ++counts[order[i]];

    std::size_t pos = 0;
    for (std::size_t i = 0; i < counts[0]; ++i) split.train.push_back(*cls[pos++]);
    for (std::size_t i = 0; i < counts[1]; ++i) split.validation.push_back(*cls[pos++]);
    for (std::size_t i = 0; i < counts[2]; ++i) split.test.push_back(*cls[pos++]);
  }
  return split;
}

ImageRecord augment(const ImageRecord& rec, const AugmentationSpec& spec,
                    std::uint64_t draw_seed) {
  auto rng = make_rng(draw_seed);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  // Fixed draw order: hflip, vflip, scale, shear.
  const bool hflip = uni(rng) < spec.horizontal_flip_prob;
  const bool vflip = uni(rng) < spec.vertical_flip_prob;
  const double s = spec.scale_range[0] +
                   (spec.scale_range[1] - spec.scale_range[0]) * uni(rng);
  const double shear_deg = spec.shear_range_deg[0] +
                           (spec.shear_range_deg[1] - spec.shear_range_deg[0]) * uni(rng);
  const double shear = std::tan(shear_deg * M_PI / 180.0);

  // Forward map about the center: Flip * Scale * Shear. The warp applies the
  // inverse to each output pixel.
  double m00 = s, m01 = s * shear, m10 = 0.0, m11 = s;
  if (hflip) {
    m00 = -m00;
    m01 = -m01;
  }
  if (vflip) {
    m10 = -m10;
    m11 = -m11;
  }
  const double det = m00 * m11 - m01 * m10;
  const double i00 = m11 / det, i01 = -m01 / det, i10 = -m10 / det, i11 = m00 / det;

  const std::size_t c = rec.pixels.dim(0), h = rec.pixels.dim(1), w = rec.pixels.dim(2);
  const double cy = (static_cast<double>(h) - 1.0) / 2.0;
  const double cx = (static_cast<double>(w) - 1.0) / 2.0;
  Tensor<float> out(rec.pixels.shape());
  const auto& iv = rec.pixels.data();
  auto& ov = out.data();
  for (std::size_t ci = 0; ci < c; ++ci) {
    const float* plane = iv.data() + ci * h * w;
    for (std::size_t y = 0; y < h; ++y) {
      const double ry = static_cast<double>(y) - cy;
      for (std::size_t x = 0; x < w; ++x) {
        const double rx = static_cast<double>(x) - cx;
        const double sx = cx + i00 * rx + i01 * ry;
        const double sy = cy + i10 * rx + i11 * ry;
        // Bilinear with replicate border.
        const double fx = std::clamp(sx, 0.0, static_cast<double>(w) - 1.0);
        const double fy = std::clamp(sy, 0.0, static_cast<double>(h) - 1.0);
        const std::size_t x0 = static_cast<std::size_t>(fx);
        const std::size_t y0 = static_cast<std::size_t>(fy);
        const std::size_t x1 = std::min(x0 + 1, w - 1);
        const std::size_t y1 = std::min(y0 + 1, h - 1);
        const double ax = fx - static_cast<double>(x0);
        const double ay = fy - static_cast<double>(y0);
        const double v = (1.0 - ay) * ((1.0 - ax) * plane[y0 * w + x0] + ax * plane[y0 * w + x1]) +
                         ay * ((1.0 - ax) * plane[y1 * w + x0] + ax * plane[y1 * w + x1]);
        ov[(ci * h + y) * w + x] = static_cast<float>(v);
      }
    }
  }
  ImageRecord result;
  result.id = rec.id;
  result.label = rec.label;
  result.source = rec.source;
  result.pixels = std::move(out);
  return result;
}

namespace {

ImageRecord synth_image(int label, std::size_t index, const SyntheticSpec& spec) {
  auto rng = make_rng(mix_seed(spec.seed, static_cast<std::uint64_t>(label), index));
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const std::size_t s = spec.size;
  const double sd = static_cast<double>(s);

  const double background = 0.55 + 0.10 * (uni(rng) - 0.5);
  const double cx = sd / 2.0 + sd / 8.0 * (uni(rng) - 0.5) * 2.0;
  const double cy = sd / 2.0 + sd / 8.0 * (uni(rng) - 0.5) * 2.0;
  const double radius = sd * (0.18 + 0.12 * uni(rng));

  // Boundary radius as a Fourier series in the polar angle. Benign lesions
  // get one low-order, low-amplitude term (near-ellipse); malignant ones get
  // several higher-order terms (spiculation).
  std::vector<double> amp, phase;
  std::vector<int> freq;
  double edge_width, lesion_level, texture;
  if (label == 0) {
    freq = {2};
    amp = {0.06 * uni(rng)};
    phase = {2.0 * M_PI * uni(rng)};
    edge_width = 2.5;
    lesion_level = 0.26 + 0.06 * (uni(rng) - 0.5);
    texture = 0.0;
  } else {
    for (int k = 3; k <= 8; ++k) {
      freq.push_back(k);
      amp.push_back(0.05 + 0.08 * uni(rng));
      phase.push_back(2.0 * M_PI * uni(rng));
    }
    edge_width = 0.7;
    lesion_level = 0.20 + 0.06 * (uni(rng) - 0.5);
    texture = 0.08;
  }

  std::vector<float> pixels(s * s);
  for (std::size_t y = 0; y < s; ++y) {
    for (std::size_t x = 0; x < s; ++x) {
      const double dx = static_cast<double>(x) - cx;
      const double dy = static_cast<double>(y) - cy;
      const double dist = std::sqrt(dx * dx + dy * dy);
      const double theta = std::atan2(dy, dx);
      double r = radius;
      for (std::size_t k = 0; k < freq.size(); ++k) {
        r += radius * amp[k] * std::cos(freq[k] * theta + phase[k]);
      }
      const double inside = 1.0 / (1.0 + std::exp((dist - r) / edge_width));
      double v = background * (1.0 - inside) + lesion_level * inside;
      if (texture > 0.0) v += inside * texture * gauss(rng);
      v *= 1.0 + spec.noise_level * gauss(rng);
      pixels[y * s + x] = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
  }

  ImageRecord rec;
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%s/synth_%04zu", kClassDirs[label], index);
  rec.id = buf;
  rec.label = label;
  rec.source = "synthetic";
  rec.pixels = Tensor<float>::from_data({1, s, s}, std::move(pixels));
  return rec;
}

}  // namespace

std::vector<ImageRecord> generate_synthetic(const SyntheticSpec& spec) {
  if (spec.count_per_class < 1) throw ParameterError("generate_synthetic: count must be >= 1");
  if (spec.size < 8) throw ParameterError("generate_synthetic: image size must be >= 8");
  std::vector<ImageRecord> records;
  records.reserve(spec.count_per_class * 2);
  for (int label = 0; label < 2; ++label) {
    for (std::size_t i = 0; i < spec.count_per_class; ++i) {
      records.push_back(synth_image(label, i, spec));
    }
  }
  return records;
}

void write_split_manifest(const std::string& path, const DatasetSplit& split) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write manifest: " + path);
  out << "id,label,split\n";
  for (const auto& rec : split.train) out << rec.id << "," << rec.label << ",train\n";
  for (const auto& rec : split.validation) out << rec.id << "," << rec.label << ",validation\n";
  for (const auto& rec : split.test) out << rec.id << "," << rec.label << ",test\n";
}

}  // namespace cmtboost
