#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "metadet/tensor.hpp"

namespace metadet {

// 8-bit RGB raster, rows top to bottom, 3 bytes per pixel.
struct ImageU8 {
  int width = 0;
  int height = 0;
  std::vector<uint8_t> rgb;

  ImageU8() = default;
  ImageU8(int w, int h) : width(w), height(h), rgb(size_t(w) * h * 3, 0) {}
  uint8_t* px(int x, int y) { return rgb.data() + (size_t(y) * width + x) * 3; }
  const uint8_t* px(int x, int y) const { return rgb.data() + (size_t(y) * width + x) * 3; }
};

void write_png(const std::string& path, const ImageU8& img);
ImageU8 read_png(const std::string& path);

// {H,W,3} float tensor scaled to [0,1].
Tensor image_to_tensor(const ImageU8& img);

// Binary PGM (P5) with linear min-max scaling of a {H,W} map to 0..255.
// A constant map writes all zeros.
void write_pgm(const std::string& path, const Tensor& map);

}  // namespace metadet
