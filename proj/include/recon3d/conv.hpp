#pragma once

// Convolutions on images stored as (H*W) x C row-major matrices, lowered to
// index-map gathers (im2col, nearest upsampling) plus a matmul.

#include "recon3d/nn.hpp"

#include <map>
#include <mutex>
#include <tuple>

namespace recon3d {

struct ImageShape {
  int height = 0, width = 0, channels = 0;
};

inline IndexMap im2col_index(ImageShape in, int kernel, int stride) {
  static std::mutex mu;
  static std::map<std::tuple<int, int, int, int, int>, IndexMap> cache;
  const auto key = std::make_tuple(in.height, in.width, in.channels, kernel, stride);
  std::lock_guard<std::mutex> lock(mu);
  if (auto it = cache.find(key); it != cache.end()) return it->second;
  const int pad = (kernel - 1) / 2;
  const int ho = (in.height + 2 * pad - kernel) / stride + 1;
  const int wo = (in.width + 2 * pad - kernel) / stride + 1;
  const int cols = kernel * kernel * in.channels;
  auto idx = std::make_shared<std::vector<int>>(static_cast<std::size_t>(ho) * wo * cols, -1);
  for (int oy = 0; oy < ho; ++oy) {
    for (int ox = 0; ox < wo; ++ox) {
      const std::size_t row = static_cast<std::size_t>(oy) * wo + ox;
      for (int ky = 0; ky < kernel; ++ky) {
        const int iy = oy * stride - pad + ky;
        for (int kx = 0; kx < kernel; ++kx) {
          const int ix = ox * stride - pad + kx;
          if (iy < 0 || iy >= in.height || ix < 0 || ix >= in.width) continue;
          for (int c = 0; c < in.channels; ++c) {
            (*idx)[row * cols + (static_cast<std::size_t>(ky) * kernel + kx) * in.channels + c] =
                (iy * in.width + ix) * in.channels + c;
          }
        }
      }
    }
  }
  IndexMap out = idx;
  cache.emplace(key, out);
  return out;
}

inline IndexMap upsample2_index(ImageShape in) {
  static std::mutex mu;
  static std::map<std::tuple<int, int, int>, IndexMap> cache;
  const auto key = std::make_tuple(in.height, in.width, in.channels);
  std::lock_guard<std::mutex> lock(mu);
  if (auto it = cache.find(key); it != cache.end()) return it->second;
  const int ho = in.height * 2, wo = in.width * 2;
  auto idx = std::make_shared<std::vector<int>>(static_cast<std::size_t>(ho) * wo * in.channels);
  for (int y = 0; y < ho; ++y) {
    for (int x = 0; x < wo; ++x) {
      for (int c = 0; c < in.channels; ++c) {
        (*idx)[(static_cast<std::size_t>(y) * wo + x) * in.channels + c] = ((y / 2) * in.width + x / 2) * in.channels + c;
      }
    }
  }
  IndexMap out = idx;
  cache.emplace(key, out);
  return out;
}

template <class T>
Var<T> upsample2(Var<T> x, ImageShape in) {
  return gather(x, static_cast<Eigen::Index>(in.height) * 2 * in.width * 2, in.channels, upsample2_index(in));
}

template <class T>
struct Conv2d {
  Linear<T> proj;  // (k*k*Cin) x Cout
  int kernel = 3, stride = 1, in_channels = 0, out_channels = 0;

  Conv2d() = default;
  Conv2d(ParamSet<T>& ps, const std::string& name, int cin, int cout, int k, int s, Rng& rng)
      : kernel(k), stride(s), in_channels(cin), out_channels(cout) {
    proj = Linear<T>(ps, name, static_cast<Eigen::Index>(k) * k * cin, cout, rng);
  }

  ImageShape output_shape(ImageShape in) const {
    const int pad = (kernel - 1) / 2;
    return {(in.height + 2 * pad - kernel) / stride + 1, (in.width + 2 * pad - kernel) / stride + 1, out_channels};
  }

  Var<T> operator()(Tape<T>& tape, Var<T> x, ImageShape in) const {
    if (in.channels != in_channels) throw std::invalid_argument("conv2d: channel mismatch");
    const ImageShape out = output_shape(in);
    Var<T> cols = kernel == 1 && stride == 1
                      ? x
                      : gather(x, static_cast<Eigen::Index>(out.height) * out.width,
                               static_cast<Eigen::Index>(kernel) * kernel * in.channels, im2col_index(in, kernel, stride));
    return proj(tape, cols);
  }
};

}  // namespace recon3d
