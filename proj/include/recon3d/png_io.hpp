#pragma once

// 8-bit RGB PNG read/write through libpng's simplified API.

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace recon3d {

struct RgbImage8 {
  int width = 0, height = 0;
  std::vector<std::uint8_t> pixels;  // interleaved RGB
};

inline std::uint8_t to_byte(float v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)); }

inline RgbImage8 to_rgb8(const std::vector<float>& rgb, int width, int height) {
  if (rgb.size() != static_cast<std::size_t>(width) * height * 3) throw std::invalid_argument("to_rgb8: buffer size mismatch");
  RgbImage8 im{width, height, std::vector<std::uint8_t>(rgb.size())};
  std::transform(rgb.begin(), rgb.end(), im.pixels.begin(), to_byte);
  return im;
}

inline std::vector<float> to_float(const RgbImage8& im) {
  std::vector<float> out(im.pixels.size());
  std::transform(im.pixels.begin(), im.pixels.end(), out.begin(), [](std::uint8_t b) { return b / 255.0f; });
  return out;
}

inline void write_png(const std::string& path, const RgbImage8& im) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(im.width);
  img.height = static_cast<png_uint_32>(im.height);
  img.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&img, path.c_str(), 0, im.pixels.data(), 0, nullptr)) {
    throw std::runtime_error("cannot write PNG " + path + ": " + img.message);
  }
}

inline RgbImage8 read_png(const std::string& path) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str())) throw std::runtime_error("cannot read PNG " + path + ": " + img.message);
  img.format = PNG_FORMAT_RGB;
  RgbImage8 im;
  im.width = static_cast<int>(img.width);
  im.height = static_cast<int>(img.height);
  im.pixels.resize(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, im.pixels.data(), 0, nullptr)) {
    png_image_free(&img);
    throw std::runtime_error("corrupt PNG " + path + ": " + img.message);
  }
  return im;
}

}  // namespace recon3d
