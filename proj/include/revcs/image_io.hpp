#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "revcs/tensor.hpp"

namespace revcs {

// float image in [0,1], planar CHW; C is 1 (grayscale) or 3 (RGB)
struct Image {
  int64_t channels = 0;
  int64_t height = 0;
  int64_t width = 0;
  std::vector<float> data;

  int64_t size() const { return channels * height * width; }
};

// 8-bit binary netpbm (P5/P6, maxval 255) and the raw float container RCSI.
// Readers report malformed input with the byte offset; writers emit the
// canonical form, so write(read(f)) is byte-identical for canonical files and
// the u8 -> float -> u8 value round trip is exact for all levels.
Image read_image(const std::string& path);  // dispatches on magic / extension
void write_image(const std::string& path, const Image& img);  // by extension

Image read_pnm(const std::string& path);
void write_pgm(const std::string& path, const Image& img);
void write_ppm(const std::string& path, const Image& img);

Image read_rcsi(const std::string& path);
void write_rcsi(const std::string& path, const Image& img);

template <typename T>
Tensor<T> image_to_tensor(const Image& img) {
  Tensor<T> t(Shape{img.channels, img.height, img.width});
  for (int64_t i = 0; i < t.size(); ++i) t[i] = T(img.data[size_t(i)]);
  return t;
}

template <typename T>
Image tensor_to_image(const Tensor<T>& t) {
  require(t.rank() == 3, Errc::shape_mismatch, "image tensor must be CHW");
  Image img;
  img.channels = t.dim(0);
  img.height = t.dim(1);
  img.width = t.dim(2);
  img.data.resize(size_t(t.size()));
  for (int64_t i = 0; i < t.size(); ++i) img.data[size_t(i)] = float(t[i]);
  return img;
}

inline uint8_t to_u8(float v) {
  float c = v < 0.f ? 0.f : (v > 1.f ? 1.f : v);
  return uint8_t(std::lround(c * 255.f));
}

}  // namespace revcs
