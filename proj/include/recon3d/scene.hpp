#pragma once

// Procedural rooms of axis-aligned boxes: generation, orbit trajectories,
// exact ray-cast RGB-D rendering and a direct top-down ground-truth render.

#include "recon3d/geometry.hpp"

#include <algorithm>
#include <array>
#include <cstdint>
#include <limits>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace recon3d {

// Every class stays below the camera eye height, so cameras never sit inside
// an object.
struct ObjectClass {
  const char* name;
  double min_w, max_w;  // long footprint side
  double min_d, max_d;  // short footprint side
  double min_h, max_h;
};

inline const std::array<ObjectClass, 6>& object_classes() {
  static const std::array<ObjectClass, 6> k{{
      {"bed", 1.9, 2.1, 1.3, 1.6, 0.45, 0.6},
      {"table", 1.0, 1.4, 0.7, 0.9, 0.7, 0.8},
      {"chair", 0.5, 0.6, 0.5, 0.6, 0.85, 1.0},
      {"sofa", 1.7, 2.0, 0.8, 0.95, 0.75, 0.9},
      {"cabinet", 0.5, 0.8, 0.45, 0.6, 1.3, 1.5},
      {"lamp", 0.35, 0.45, 0.35, 0.45, 1.1, 1.4},
  }};
  return k;
}

// Classes that never appear in generated rooms; used for zero-target queries.
inline const std::array<const char*, 2>& absent_classes() {
  static const std::array<const char*, 2> k{{"piano", "toilet"}};
  return k;
}

struct NamedColor {
  const char* name;
  float r, g, b;
};

inline const std::array<NamedColor, 6>& palette() {
  static const std::array<NamedColor, 6> k{{
      {"red", 0.85f, 0.10f, 0.10f},
      {"green", 0.10f, 0.70f, 0.20f},
      {"blue", 0.15f, 0.25f, 0.85f},
      {"yellow", 0.90f, 0.85f, 0.10f},
      {"purple", 0.55f, 0.15f, 0.70f},
      {"orange", 0.95f, 0.50f, 0.05f},
  }};
  return k;
}

inline const Eigen::Vector3f& floor_color() {
  static const Eigen::Vector3f c(0.55f, 0.45f, 0.35f);
  return c;
}

// Walls are indexed x=0, x=max, y=0, y=max.
inline const std::array<Eigen::Vector3f, 4>& wall_colors() {
  static const std::array<Eigen::Vector3f, 4> c{{{0.80f, 0.80f, 0.78f}, {0.70f, 0.72f, 0.75f},
                                                 {0.62f, 0.62f, 0.60f}, {0.88f, 0.86f, 0.82f}}};
  return c;
}

struct SceneObject {
  int id = 0;
  std::string label;
  std::string color_name;
  Eigen::Vector3f color = Eigen::Vector3f::Zero();
  Box3 box;
};

struct SceneSpec {
  Box3 room;  // floor at z = room.lo.z() = 0
  std::vector<SceneObject> objects;
  std::uint64_t seed = 0;

  void validate() const {
    if (room.degenerate()) throw std::invalid_argument("scene: degenerate room");
    for (std::size_t a = 0; a < objects.size(); ++a) {
      const auto& o = objects[a];
      if (o.box.degenerate()) throw std::invalid_argument("scene: degenerate object box " + std::to_string(o.id));
      if (!room.contains(o.box.lo) || !room.contains(o.box.hi)) {
        throw std::invalid_argument("scene: object " + std::to_string(o.id) + " outside room");
      }
      for (std::size_t b = a + 1; b < objects.size(); ++b) {
        if (objects[b].id == o.id) throw std::invalid_argument("scene: duplicate object id " + std::to_string(o.id));
      }
    }
  }

  const SceneObject* find(int id) const {
    for (const auto& o : objects) {
      if (o.id == id) return &o;
    }
    return nullptr;
  }

  BevConfig bev_config(int resolution) const {
    BevConfig cfg;
    cfg.x_min = room.lo.x();
    cfg.x_max = room.hi.x();
    cfg.y_min = room.lo.y();
    cfg.y_max = room.hi.y();
    cfg.resolution = resolution;
    return cfg;
  }
};

struct SceneConfig {
  int min_objects = 3;
  int max_objects = 6;
  double min_room = 4.0;
  double max_room = 6.0;
  double wall_height = 2.5;
  double wall_margin = 0.15;
  double object_gap = 0.1;
  int max_retries = 500;

  void validate() const {
    if (min_objects < 0 || max_objects < min_objects) throw std::invalid_argument("scene config: bad object count range");
    if (!(min_room > 0) || max_room < min_room) throw std::invalid_argument("scene config: bad room size range");
    if (!(wall_height > 0)) throw std::invalid_argument("scene config: wall height must be positive");
  }
};

inline constexpr int kLayoutAttempts = 20;

inline SceneSpec generate_scene(std::uint64_t seed, const SceneConfig& cfg = {}) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };

  SceneSpec scene;
  scene.seed = seed;
  scene.room.lo = Vec3::Zero();
  scene.room.hi = Vec3(uniform(cfg.min_room, cfg.max_room), uniform(cfg.min_room, cfg.max_room), cfg.wall_height);

  const int count = std::uniform_int_distribution<int>(cfg.min_objects, cfg.max_objects)(rng);
  const auto& classes = object_classes();
  const auto& colors = palette();
  // A layout that jams is redrawn from scratch; the draw sequence stays a
  // pure function of the seed.
  for (int layout = 0; layout < kLayoutAttempts; ++layout) {
    scene.objects.clear();
    bool ok = true;
    for (int id = 0; id < count && ok; ++id) {
      const auto& cls = classes[std::uniform_int_distribution<std::size_t>(0, classes.size() - 1)(rng)];
      const auto& col = colors[std::uniform_int_distribution<std::size_t>(0, colors.size() - 1)(rng)];
      double w = uniform(cls.min_w, cls.max_w);
      double d = uniform(cls.min_d, cls.max_d);
      const double h = uniform(cls.min_h, cls.max_h);
      if (unit(rng) < 0.5) std::swap(w, d);
      bool placed = false;
      for (int attempt = 0; attempt < cfg.max_retries && !placed; ++attempt) {
        const double x0 = uniform(cfg.wall_margin, scene.room.hi.x() - cfg.wall_margin - w);
        const double y0 = uniform(cfg.wall_margin, scene.room.hi.y() - cfg.wall_margin - d);
        Box3 box{Vec3(x0, y0, 0.0), Vec3(x0 + w, y0 + d, h)};
        Box3 padded{box.lo - Vec3(cfg.object_gap, cfg.object_gap, 0), box.hi + Vec3(cfg.object_gap, cfg.object_gap, 0)};
        placed = std::none_of(scene.objects.begin(), scene.objects.end(),
                              [&](const SceneObject& o) { return padded.overlaps(o.box); });
        if (placed) {
          scene.objects.push_back(SceneObject{id, cls.name, col.name, Eigen::Vector3f(col.r, col.g, col.b), box});
        }
      }
      ok = placed;
    }
    if (ok) return scene;
  }
  throw std::runtime_error("generate_scene: could not place " + std::to_string(count) + " objects after " +
                           std::to_string(kLayoutAttempts) + " layouts of " + std::to_string(cfg.max_retries) +
                           " attempts each (seed " + std::to_string(seed) + ")");
}

struct TrajectoryConfig {
  double radius_fraction = 0.38;  // of the shorter room side
  double eye_height = 1.6;
  double target_height = 0.5;
};

// Inward-facing orbit around the room center; the starting phase is derived
// from the scene seed.
inline std::vector<CameraExtrinsics> sample_trajectory(const SceneSpec& scene, int num_views,
                                                       const TrajectoryConfig& cfg = {}) {
  if (num_views < 1) throw std::invalid_argument("sample_trajectory: num_views must be >= 1");
  std::mt19937_64 rng(scene.seed ^ 0x9e3779b97f4a7c15ULL);
  const double phase = std::uniform_real_distribution<double>(0.0, 2.0 * M_PI)(rng);
  const Vec3 c = scene.room.center();
  const double radius = cfg.radius_fraction * std::min(scene.room.extent().x(), scene.room.extent().y());
  std::vector<CameraExtrinsics> poses;
  poses.reserve(static_cast<std::size_t>(num_views));
  for (int k = 0; k < num_views; ++k) {
    const double a = phase + 2.0 * M_PI * k / num_views;
    const Vec3 eye(c.x() + radius * std::cos(a), c.y() + radius * std::sin(a), cfg.eye_height);
    const Vec3 target(c.x(), c.y(), cfg.target_height);
    poses.push_back(CameraExtrinsics::look_at(eye, target));
  }
  return poses;
}

// Surface hit by a ray; object >= 0 is an object index, -1 floor, -2..-5 walls.
struct RayHit {
  double t = std::numeric_limits<double>::infinity();
  int surface = std::numeric_limits<int>::min();
  bool hit() const { return std::isfinite(t); }
};

namespace detail {

// Slab test for a ray starting outside the box. Returns entry distance.
inline std::optional<double> ray_box(const Vec3& o, const Vec3& d, const Box3& b) {
  double t0 = 0.0, t1 = std::numeric_limits<double>::infinity();
  for (int a = 0; a < 3; ++a) {
    if (std::abs(d[a]) < 1e-15) {
      if (o[a] < b.lo[a] || o[a] > b.hi[a]) return std::nullopt;
      continue;
    }
    double ta = (b.lo[a] - o[a]) / d[a];
    double tb = (b.hi[a] - o[a]) / d[a];
    if (ta > tb) std::swap(ta, tb);
    t0 = std::max(t0, ta);
    t1 = std::min(t1, tb);
    if (t0 > t1) return std::nullopt;
  }
  if (t0 <= 0) return std::nullopt;
  return t0;
}

}  // namespace detail

inline RayHit cast_ray(const SceneSpec& scene, const Vec3& origin, const Vec3& dir) {
  RayHit best;
  for (std::size_t k = 0; k < scene.objects.size(); ++k) {
    if (auto t = detail::ray_box(origin, dir, scene.objects[k].box); t && *t < best.t) {
      best.t = *t;
      best.surface = static_cast<int>(k);
    }
  }
  const Box3& r = scene.room;
  auto plane = [&](int axis, double value, int surface) {
    if (std::abs(dir[axis]) < 1e-15) return;
    const double t = (value - origin[axis]) / dir[axis];
    if (!(t > 0) || t >= best.t) return;
    const Vec3 p = origin + t * dir;
    for (int a = 0; a < 3; ++a) {
      if (a == axis) continue;
      if (p[a] < r.lo[a] - 1e-9 || p[a] > r.hi[a] + 1e-9) return;
    }
    best.t = t;
    best.surface = surface;
  };
  plane(2, r.lo.z(), -1);
  plane(0, r.lo.x(), -2);
  plane(0, r.hi.x(), -3);
  plane(1, r.lo.y(), -4);
  plane(1, r.hi.y(), -5);
  return best;
}

inline Eigen::Vector3f surface_color(const SceneSpec& scene, int surface) {
  if (surface >= 0) return scene.objects[static_cast<std::size_t>(surface)].color;
  if (surface == -1) return floor_color();
  return wall_colors()[static_cast<std::size_t>(-surface - 2)];
}

inline PosedFrame render_frame(const SceneSpec& scene, const CameraIntrinsics& k, const CameraExtrinsics& t,
                               int index = 0) {
  k.validate();
  t.validate();
  PosedFrame f;
  f.intrinsics = k;
  f.extrinsics = t;
  f.index = index;
  const std::size_t n = static_cast<std::size_t>(k.width) * k.height;
  f.rgb.assign(n * 3, 0.0f);
  f.depth.assign(n, 0.0f);
  for (int i = 0; i < k.height; ++i) {
    for (int j = 0; j < k.width; ++j) {
      // Camera-frame ray with unit z so that the hit distance is the depth.
      const Vec3 ray_cam((j - k.cx) / k.fx, (i - k.cy) / k.fy, 1.0);
      const RayHit hit = cast_ray(scene, t.translation, t.rotation * ray_cam);
      if (!hit.hit()) continue;
      const std::size_t idx = static_cast<std::size_t>(i) * k.width + j;
      f.depth[idx] = static_cast<float>(hit.t);
      const Eigen::Vector3f c = surface_color(scene, hit.surface);
      for (int ch = 0; ch < 3; ++ch) f.rgb[idx * 3 + ch] = c[ch];
    }
  }
  return f;
}

// Index of the object visible at a pixel, or -1.
inline std::vector<int> render_object_ids(const SceneSpec& scene, const CameraIntrinsics& k, const CameraExtrinsics& t) {
  std::vector<int> ids(static_cast<std::size_t>(k.width) * k.height, -1);
  for (int i = 0; i < k.height; ++i) {
    for (int j = 0; j < k.width; ++j) {
      const Vec3 ray_cam((j - k.cx) / k.fx, (i - k.cy) / k.fy, 1.0);
      const RayHit hit = cast_ray(scene, t.translation, t.rotation * ray_cam);
      if (hit.hit() && hit.surface >= 0) ids[static_cast<std::size_t>(i) * k.width + j] = scene.objects[static_cast<std::size_t>(hit.surface)].id;
    }
  }
  return ids;
}

// Top-down orthographic render straight from the boxes: each cell shows the
// tallest object covering its center, else the floor.
inline BevImage render_bev_gt(const SceneSpec& scene, const BevConfig& cfg) {
  cfg.validate();
  BevImage img;
  img.resolution = cfg.resolution;
  img.rgb.assign(static_cast<std::size_t>(cfg.resolution) * cfg.resolution * 3, 0.0f);
  for (int r = 0; r < cfg.resolution; ++r) {
    for (int c = 0; c < cfg.resolution; ++c) {
      const auto [x, y] = cfg.cell_center(r, c);
      Eigen::Vector3f color = Eigen::Vector3f::Zero();
      const bool in_room = x >= scene.room.lo.x() && x <= scene.room.hi.x() && y >= scene.room.lo.y() && y <= scene.room.hi.y();
      if (in_room) color = floor_color();
      double top = -std::numeric_limits<double>::infinity();
      for (const auto& o : scene.objects) {
        if (x >= o.box.lo.x() && x < o.box.hi.x() && y >= o.box.lo.y() && y < o.box.hi.y() && o.box.hi.z() > top) {
          const bool clipped = cfg.z_clip && (o.box.hi.z() < cfg.z_clip->first || o.box.hi.z() > cfg.z_clip->second);
          if (clipped) continue;
          top = o.box.hi.z();
          color = o.color;
        }
      }
      const std::size_t idx = (static_cast<std::size_t>(r) * cfg.resolution + c) * 3;
      for (int ch = 0; ch < 3; ++ch) img.rgb[idx + ch] = color[ch];
    }
  }
  return img;
}

}  // namespace recon3d
