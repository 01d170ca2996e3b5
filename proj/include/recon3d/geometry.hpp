#pragma once

// Pinhole cameras, depth unprojection, 3D sinusoidal position encoding and
// top-down (BEV) splatting of colored point clouds.
//
// Conventions: world z is up. Camera frame is x right, y down, z forward.
// Pixel (row i, col j) is the image-plane point (u, v) = (j, i); generated
// cameras put the principal point at ((W-1)/2, (H-1)/2), so integer (j, i)
// are pixel centers for both the renderer and the unprojection.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace recon3d {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

struct CameraIntrinsics {
  double fx = 1, fy = 1, cx = 0, cy = 0;
  int width = 1, height = 1;

  void validate() const {
    if (!(fx > 0) || !(fy > 0)) throw std::invalid_argument("intrinsics: focal lengths must be positive");
    if (width <= 0 || height <= 0) throw std::invalid_argument("intrinsics: image size must be positive");
    if (cx < 0 || cx >= width || cy < 0 || cy >= height) throw std::invalid_argument("intrinsics: principal point outside image");
  }

  Mat3 matrix() const {
    Mat3 k;
    k << fx, 0, cx, 0, fy, cy, 0, 0, 1;
    return k;
  }

  // Square pixels, principal point at the image center.
  static CameraIntrinsics from_fov(int width, int height, double horizontal_fov_rad) {
    CameraIntrinsics k;
    k.width = width;
    k.height = height;
    k.fx = k.fy = 0.5 * width / std::tan(0.5 * horizontal_fov_rad);
    k.cx = 0.5 * (width - 1);
    k.cy = 0.5 * (height - 1);
    return k;
  }
};

// Camera-to-world rigid transform.
struct CameraExtrinsics {
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  void validate(double tol = 1e-6) const {
    if ((rotation.transpose() * rotation - Mat3::Identity()).cwiseAbs().maxCoeff() > tol) {
      throw std::invalid_argument("extrinsics: rotation is not orthonormal");
    }
    if (std::abs(rotation.determinant() - 1.0) > tol) throw std::invalid_argument("extrinsics: rotation determinant != +1");
  }

  Vec3 to_world(const Vec3& p_cam) const { return rotation * p_cam + translation; }
  Vec3 to_camera(const Vec3& p_world) const { return rotation.transpose() * (p_world - translation); }

  CameraExtrinsics compose(const CameraExtrinsics& inner) const {
    return {rotation * inner.rotation, rotation * inner.translation + translation};
  }

  // Camera at `eye` looking at `target`; `up` is world up.
  static CameraExtrinsics look_at(const Vec3& eye, const Vec3& target, const Vec3& up = Vec3::UnitZ()) {
    const Vec3 forward = (target - eye).normalized();
    Vec3 right = forward.cross(up);
    if (right.norm() < 1e-9) right = forward.cross(Vec3::UnitY());
    right.normalize();
    const Vec3 down = forward.cross(right);
    CameraExtrinsics t;
    t.rotation.col(0) = right;
    t.rotation.col(1) = down;
    t.rotation.col(2) = forward;
    t.translation = eye;
    return t;
  }
};

struct Box3 {
  Vec3 lo = Vec3::Zero();
  Vec3 hi = Vec3::Zero();

  Vec3 center() const { return 0.5 * (lo + hi); }
  Vec3 extent() const { return hi - lo; }
  double volume() const {
    const Vec3 e = extent();
    return std::max(0.0, e.x()) * std::max(0.0, e.y()) * std::max(0.0, e.z());
  }
  bool degenerate() const { return !((hi.array() > lo.array()).all()); }
  bool contains(const Vec3& p, double tol = 1e-6) const {
    return (p.array() >= lo.array() - tol).all() && (p.array() <= hi.array() + tol).all();
  }
  // Open-interval overlap: touching faces do not count.
  bool overlaps(const Box3& o) const { return (lo.array() < o.hi.array()).all() && (o.lo.array() < hi.array()).all(); }
};

inline double intersection_volume(const Box3& a, const Box3& b) {
  const Vec3 lo = a.lo.cwiseMax(b.lo);
  const Vec3 hi = a.hi.cwiseMin(b.hi);
  const Vec3 e = (hi - lo).cwiseMax(0.0);
  return e.x() * e.y() * e.z();
}

inline double box_iou(const Box3& a, const Box3& b) {
  const double inter = intersection_volume(a, b);
  const double uni = a.volume() + b.volume() - inter;
  return uni > 0 ? inter / uni : 0.0;
}

// One RGB-D frame. rgb is H*W*3 interleaved in [0,1]; depth in meters with 0
// where the ray hit nothing.
struct PosedFrame {
  std::vector<float> rgb;
  std::vector<float> depth;
  CameraIntrinsics intrinsics;
  CameraExtrinsics extrinsics;
  int index = 0;

  int height() const { return intrinsics.height; }
  int width() const { return intrinsics.width; }
};

struct PointMap {
  int height = 0, width = 0;
  std::vector<Vec3> coords;
  std::vector<std::uint8_t> valid;

  const Vec3& at(int i, int j) const { return coords[static_cast<std::size_t>(i) * width + j]; }
  bool is_valid(int i, int j) const { return valid[static_cast<std::size_t>(i) * width + j] != 0; }
};

// World point seen at pixel (row i, col j) with the given depth, or nullopt for
// non-positive depth.
inline std::optional<Vec3> unproject_pixel(double i, double j, double depth, const CameraIntrinsics& k,
                                           const CameraExtrinsics& t) {
  if (!(depth > 0) || !std::isfinite(depth)) return std::nullopt;
  const Vec3 ray((j - k.cx) / k.fx, (i - k.cy) / k.fy, 1.0);
  return t.to_world(ray * depth);
}

struct PixelProjection {
  double row, col, depth;
};

// Inverse of unproject_pixel; nullopt for points at or behind the camera.
inline std::optional<PixelProjection> project_point(const Vec3& p_world, const CameraIntrinsics& k,
                                                    const CameraExtrinsics& t) {
  const Vec3 pc = t.to_camera(p_world);
  if (!(pc.z() > 0)) return std::nullopt;
  return PixelProjection{k.fy * pc.y() / pc.z() + k.cy, k.fx * pc.x() / pc.z() + k.cx, pc.z()};
}

inline PointMap unproject_frame(const PosedFrame& frame) {
  const auto& k = frame.intrinsics;
  const std::size_t n = static_cast<std::size_t>(k.width) * k.height;
  if (frame.depth.size() != n) {
    throw std::invalid_argument("unproject_frame: depth map has " + std::to_string(frame.depth.size()) +
                                " pixels, intrinsics expect " + std::to_string(n));
  }
  PointMap pm;
  pm.height = k.height;
  pm.width = k.width;
  pm.coords.assign(n, Vec3::Zero());
  pm.valid.assign(n, 0);
  for (int i = 0; i < k.height; ++i) {
    for (int j = 0; j < k.width; ++j) {
      const std::size_t idx = static_cast<std::size_t>(i) * k.width + j;
      if (auto p = unproject_pixel(i, j, frame.depth[idx], k, frame.extrinsics)) {
        pm.coords[idx] = *p;
        pm.valid[idx] = 1;
      }
    }
  }
  return pm;
}

// Wavelength band of the position encoding, in meters.
struct SinusoidBand {
  double min_wavelength = 0.25;
  double max_wavelength = 16.0;
};

// Per-axis block of dim/3 channels: dim/6 sines followed by dim/6 cosines
// at geometrically spaced wavelengths; blocks concatenated x, y, z.
inline Eigen::MatrixXd sinusoidal_encode(std::span<const Vec3> coords, int dim, SinusoidBand band = {}) {
  if (dim <= 0 || dim % 6 != 0) throw std::invalid_argument("sinusoidal_encode: dim must be a positive multiple of 6");
  const int freqs = dim / 6;
  const int block = dim / 3;
  std::vector<double> omega(static_cast<std::size_t>(freqs));
  for (int f = 0; f < freqs; ++f) {
    const double r = freqs == 1 ? 0.0 : static_cast<double>(f) / (freqs - 1);
    const double lambda = band.max_wavelength * std::pow(band.min_wavelength / band.max_wavelength, r);
    omega[static_cast<std::size_t>(f)] = 2.0 * M_PI / lambda;
  }
  Eigen::MatrixXd out(static_cast<Eigen::Index>(coords.size()), dim);
  for (std::size_t n = 0; n < coords.size(); ++n) {
    for (int axis = 0; axis < 3; ++axis) {
      for (int f = 0; f < freqs; ++f) {
        const double a = omega[static_cast<std::size_t>(f)] * coords[n][axis];
        out(static_cast<Eigen::Index>(n), axis * block + f) = std::sin(a);
        out(static_cast<Eigen::Index>(n), axis * block + freqs + f) = std::cos(a);
      }
    }
  }
  return out;
}

struct BevConfig {
  double x_min = 0, x_max = 1, y_min = 0, y_max = 1;
  int resolution = 64;
  std::optional<std::pair<double, double>> z_clip;

  void validate() const {
    if (!(x_max > x_min) || !(y_max > y_min)) throw std::invalid_argument("bev: degenerate range");
    if (resolution < 8) throw std::invalid_argument("bev: resolution must be >= 8");
  }

  // Half-open cell lookup; nullopt outside the bounds.
  std::optional<std::pair<int, int>> cell(double x, double y) const {
    const double u = (x - x_min) / (x_max - x_min);
    const double v = (y - y_min) / (y_max - y_min);
    if (!(u >= 0 && u < 1 && v >= 0 && v < 1)) return std::nullopt;
    const int col = std::min(resolution - 1, static_cast<int>(std::floor(u * resolution)));
    const int row = std::min(resolution - 1, static_cast<int>(std::floor(v * resolution)));
    return std::make_pair(row, col);
  }

  // World (x, y) at the center of cell (row, col).
  std::pair<double, double> cell_center(int row, int col) const {
    return {x_min + (col + 0.5) * (x_max - x_min) / resolution, y_min + (row + 0.5) * (y_max - y_min) / resolution};
  }
};

// Square RGB image, interleaved, values in [0,1]. Row index follows world y.
struct BevImage {
  int resolution = 0;
  std::vector<float> rgb;
};

struct ColoredPoint {
  Vec3 position;
  Eigen::Vector3f color;
};

struct BevSplat {
  BevImage image;
  std::vector<std::uint8_t> occupancy;
};

// Orthographic top-down splat; the highest point in each cell sets its color
// (first point wins exact ties).
inline BevSplat project_to_bev(std::span<const ColoredPoint> points, const BevConfig& cfg) {
  cfg.validate();
  const std::size_t n = static_cast<std::size_t>(cfg.resolution) * cfg.resolution;
  BevSplat out;
  out.image.resolution = cfg.resolution;
  out.image.rgb.assign(n * 3, 0.0f);
  out.occupancy.assign(n, 0);
  std::vector<double> top(n, -std::numeric_limits<double>::infinity());
  for (const auto& p : points) {
    const double z = p.position.z();
    if (cfg.z_clip && (z < cfg.z_clip->first || z > cfg.z_clip->second)) continue;
    auto c = cfg.cell(p.position.x(), p.position.y());
    if (!c) continue;
    const std::size_t idx = static_cast<std::size_t>(c->first) * cfg.resolution + c->second;
    if (out.occupancy[idx] && z <= top[idx]) continue;
    top[idx] = z;
    out.occupancy[idx] = 1;
    for (int ch = 0; ch < 3; ++ch) out.image.rgb[idx * 3 + ch] = p.color[ch];
  }
  return out;
}

// Per-token validity at `stride` pixels per latent token: a token is valid
// when any pixel of its patch is occupied.
inline std::vector<std::uint8_t> blank_mask(const BevImage& bev, std::span<const std::uint8_t> occupancy, int stride) {
  const int res = bev.resolution;
  if (occupancy.size() != static_cast<std::size_t>(res) * res || bev.rgb.size() != occupancy.size() * 3) {
    throw std::invalid_argument("blank_mask: occupancy does not match BEV image shape");
  }
  if (stride <= 0 || res % stride != 0) throw std::invalid_argument("blank_mask: resolution not divisible by stride");
  const int g = res / stride;
  std::vector<std::uint8_t> tokens(static_cast<std::size_t>(g) * g, 0);
  for (int r = 0; r < res; ++r) {
    for (int c = 0; c < res; ++c) {
      if (occupancy[static_cast<std::size_t>(r) * res + c]) tokens[static_cast<std::size_t>(r / stride) * g + c / stride] = 1;
    }
  }
  return tokens;
}

}  // namespace recon3d
