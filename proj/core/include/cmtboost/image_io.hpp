#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace cmtboost {

struct GrayImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;  // row-major
};

/// Reads an 8-bit grayscale PNG (lower bit depths are expanded, 16-bit is
/// stripped). Color or palette images raise DataError naming the path.
GrayImage read_png_gray(const std::string& path);

void write_png_gray(const std::string& path, const GrayImage& img);

}  // namespace cmtboost
