#pragma once

// Synthetic RGB-D scene datasets: generation and the on-disk layout
//
//   root/manifest.json              config + ordered scene list with splits
//   root/<scene>/scene.json         SceneSpec
//   root/<scene>/frame_<k>.rgb.png  8-bit RGB
//   root/<scene>/frame_<k>.depth.raw
//   root/<scene>/cameras.json       per-frame intrinsics and extrinsics
//   root/<scene>/bev.png            top-down ground truth
//   root/<scene>/annotations.jsonl  one record per line

#include "recon3d/annotations.hpp"
#include "recon3d/png_io.hpp"
#include "recon3d/scene.hpp"

#include <nlohmann/json.hpp>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace recon3d {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

struct DatasetConfig {
  std::uint64_t seed = 0;
  int scenes = 50;
  int eval_scenes = 10;  // the last scenes form the eval split
  int frames = 8;
  int image_size = 64;
  double fov_deg = 90.0;
  int bev_resolution = 64;
  SceneConfig scene;
  TrajectoryConfig trajectory;

  void validate() const {
    if (scenes < 1) throw std::invalid_argument("dataset: need at least one scene");
    if (eval_scenes < 0 || eval_scenes > scenes) throw std::invalid_argument("dataset: eval_scenes outside [0, scenes]");
    if (frames < 1) throw std::invalid_argument("dataset: need at least one frame per scene");
    scene.validate();
  }
};

struct SceneRecord {
  std::string name;
  std::string split;  // "train" or "eval"
  SceneSpec spec;
  std::vector<PosedFrame> frames;
  BevImage bev;
  SceneAnnotations annotations;
};

struct Dataset {
  DatasetConfig config;
  std::vector<SceneRecord> scenes;

  std::vector<const SceneRecord*> split(const std::string& name) const {
    std::vector<const SceneRecord*> out;
    for (const auto& s : scenes) {
      if (name == "all" || s.split == name) out.push_back(&s);
    }
    return out;
  }
};

// Rounds colors to 8 bits so that in-memory frames equal their PNG copies.
inline void quantize_rgb(std::vector<float>& rgb) {
  for (auto& v : rgb) v = to_byte(v) / 255.0f;
}

inline SceneRecord make_scene_record(const DatasetConfig& cfg, int index) {
  SceneRecord r;
  char name[32];
  std::snprintf(name, sizeof(name), "scene_%04d", index);
  r.name = name;
  r.split = index >= cfg.scenes - cfg.eval_scenes ? "eval" : "train";
  const std::uint64_t seed = splitmix64(cfg.seed * 0x100000001b3ULL + static_cast<std::uint64_t>(index));
  r.spec = generate_scene(seed, cfg.scene);
  const CameraIntrinsics k = CameraIntrinsics::from_fov(cfg.image_size, cfg.image_size, cfg.fov_deg * M_PI / 180.0);
  const auto poses = sample_trajectory(r.spec, cfg.frames, cfg.trajectory);
  for (int f = 0; f < cfg.frames; ++f) {
    PosedFrame pf = render_frame(r.spec, k, poses[static_cast<std::size_t>(f)], f);
    quantize_rgb(pf.rgb);
    r.frames.push_back(std::move(pf));
  }
  r.bev = render_bev_gt(r.spec, r.spec.bev_config(cfg.bev_resolution));
  quantize_rgb(r.bev.rgb);
  std::mt19937_64 rng(seed ^ 0xa77a77ULL);
  r.annotations = make_annotations(r.spec, rng);
  return r;
}

inline Dataset generate_dataset(const DatasetConfig& cfg) {
  cfg.validate();
  Dataset d;
  d.config = cfg;
  for (int i = 0; i < cfg.scenes; ++i) d.scenes.push_back(make_scene_record(cfg, i));
  return d;
}

// ---------------------------------------------------------------------------
// Serialization

inline nlohmann::json to_json(const DatasetConfig& c) {
  return {{"seed", c.seed},
          {"scenes", c.scenes},
          {"eval_scenes", c.eval_scenes},
          {"frames", c.frames},
          {"image_size", c.image_size},
          {"fov_deg", c.fov_deg},
          {"bev_resolution", c.bev_resolution},
          {"scene",
           {{"min_objects", c.scene.min_objects}, {"max_objects", c.scene.max_objects}, {"min_room", c.scene.min_room},
            {"max_room", c.scene.max_room}, {"wall_height", c.scene.wall_height}, {"wall_margin", c.scene.wall_margin},
            {"object_gap", c.scene.object_gap}, {"max_retries", c.scene.max_retries}}},
          {"trajectory",
           {{"radius_fraction", c.trajectory.radius_fraction}, {"eye_height", c.trajectory.eye_height},
            {"target_height", c.trajectory.target_height}}}};
}

inline DatasetConfig dataset_config_from_json(const nlohmann::json& j, DatasetConfig c = {}) {
  auto get = [](const nlohmann::json& o, const char* k, auto& v) {
    if (o.contains(k)) v = o.at(k).get<std::decay_t<decltype(v)>>();
  };
  get(j, "seed", c.seed);
  get(j, "scenes", c.scenes);
  get(j, "eval_scenes", c.eval_scenes);
  get(j, "frames", c.frames);
  get(j, "image_size", c.image_size);
  get(j, "fov_deg", c.fov_deg);
  get(j, "bev_resolution", c.bev_resolution);
  if (j.contains("scene")) {
    const auto& s = j.at("scene");
    get(s, "min_objects", c.scene.min_objects);
    get(s, "max_objects", c.scene.max_objects);
    get(s, "min_room", c.scene.min_room);
    get(s, "max_room", c.scene.max_room);
    get(s, "wall_height", c.scene.wall_height);
    get(s, "wall_margin", c.scene.wall_margin);
    get(s, "object_gap", c.scene.object_gap);
    get(s, "max_retries", c.scene.max_retries);
  }
  if (j.contains("trajectory")) {
    const auto& t = j.at("trajectory");
    get(t, "radius_fraction", c.trajectory.radius_fraction);
    get(t, "eye_height", c.trajectory.eye_height);
    get(t, "target_height", c.trajectory.target_height);
  }
  return c;
}

inline nlohmann::json box_json(const Box3& b) { return {{"lo", {b.lo.x(), b.lo.y(), b.lo.z()}}, {"hi", {b.hi.x(), b.hi.y(), b.hi.z()}}}; }

inline Box3 box_from_json(const nlohmann::json& j) {
  Box3 b;
  for (int a = 0; a < 3; ++a) {
    b.lo[a] = j.at("lo").at(static_cast<std::size_t>(a)).get<double>();
    b.hi[a] = j.at("hi").at(static_cast<std::size_t>(a)).get<double>();
  }
  return b;
}

inline nlohmann::json to_json(const SceneSpec& s) {
  nlohmann::json objs = nlohmann::json::array();
  for (const auto& o : s.objects) {
    objs.push_back({{"id", o.id},
                    {"label", o.label},
                    {"color_name", o.color_name},
                    {"color", {o.color.x(), o.color.y(), o.color.z()}},
                    {"box", box_json(o.box)}});
  }
  return {{"seed", s.seed}, {"room", box_json(s.room)}, {"objects", objs}};
}

inline SceneSpec scene_from_json(const nlohmann::json& j) {
  SceneSpec s;
  s.seed = j.at("seed").get<std::uint64_t>();
  s.room = box_from_json(j.at("room"));
  for (const auto& o : j.at("objects")) {
    SceneObject so;
    so.id = o.at("id").get<int>();
    so.label = o.at("label").get<std::string>();
    so.color_name = o.at("color_name").get<std::string>();
    for (int c = 0; c < 3; ++c) so.color[c] = o.at("color").at(static_cast<std::size_t>(c)).get<float>();
    so.box = box_from_json(o.at("box"));
    s.objects.push_back(std::move(so));
  }
  s.validate();
  return s;
}

inline nlohmann::json camera_json(const PosedFrame& f) {
  const auto& k = f.intrinsics;
  const auto& t = f.extrinsics;
  std::vector<double> rot(9);
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) rot[static_cast<std::size_t>(r * 3 + c)] = t.rotation(r, c);
  }
  return {{"index", f.index}, {"fx", k.fx}, {"fy", k.fy}, {"cx", k.cx}, {"cy", k.cy}, {"width", k.width}, {"height", k.height},
          {"rotation", rot}, {"translation", {t.translation.x(), t.translation.y(), t.translation.z()}}};
}

inline constexpr char kDepthMagic[8] = {'R', '3', 'D', 'D', 'E', 'P', 'T', 'H'};

inline void write_depth(const std::string& path, const std::vector<float>& depth, int height, int width) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write depth file " + path);
  const std::uint32_t hw[2] = {static_cast<std::uint32_t>(height), static_cast<std::uint32_t>(width)};
  f.write(kDepthMagic, sizeof(kDepthMagic));
  f.write(reinterpret_cast<const char*>(hw), sizeof(hw));
  f.write(reinterpret_cast<const char*>(depth.data()), static_cast<std::streamsize>(depth.size() * sizeof(float)));
  if (!f) throw std::runtime_error("failed writing depth file " + path);
}

inline std::vector<float> read_depth(const std::string& path, int height, int width) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("missing depth file " + path);
  char magic[8];
  std::uint32_t hw[2];
  f.read(magic, sizeof(magic));
  f.read(reinterpret_cast<char*>(hw), sizeof(hw));
  if (!f || std::memcmp(magic, kDepthMagic, sizeof(magic)) != 0) throw std::runtime_error("corrupt depth header in " + path);
  if (hw[0] != static_cast<std::uint32_t>(height) || hw[1] != static_cast<std::uint32_t>(width)) {
    throw std::runtime_error("depth file " + path + " is " + std::to_string(hw[0]) + "x" + std::to_string(hw[1]) + ", camera says " +
                             std::to_string(height) + "x" + std::to_string(width));
  }
  std::vector<float> d(static_cast<std::size_t>(height) * width);
  f.read(reinterpret_cast<char*>(d.data()), static_cast<std::streamsize>(d.size() * sizeof(float)));
  if (!f) throw std::runtime_error("truncated depth data in " + path);
  return d;
}

namespace detail {

inline nlohmann::json read_json_file(const std::filesystem::path& p) {
  std::ifstream f(p);
  if (!f) throw std::runtime_error("missing file " + p.string());
  try {
    return nlohmann::json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("corrupt JSON in " + p.string() + ": " + e.what());
  }
}

inline void write_text(const std::filesystem::path& p, const std::string& s) {
  std::ofstream f(p);
  if (!f) throw std::runtime_error("cannot write " + p.string());
  f << s;
  if (!f) throw std::runtime_error("failed writing " + p.string());
}

}  // namespace detail

inline void write_scene(const std::filesystem::path& dir, const SceneRecord& r) {
  std::filesystem::create_directories(dir);
  detail::write_text(dir / "scene.json", to_json(r.spec).dump(1) + "\n");
  nlohmann::json cams = nlohmann::json::array();
  for (const auto& f : r.frames) {
    const std::string stem = "frame_" + std::to_string(f.index);
    write_png((dir / (stem + ".rgb.png")).string(), to_rgb8(f.rgb, f.width(), f.height()));
    write_depth((dir / (stem + ".depth.raw")).string(), f.depth, f.height(), f.width());
    cams.push_back(camera_json(f));
  }
  detail::write_text(dir / "cameras.json", cams.dump(1) + "\n");
  write_png((dir / "bev.png").string(), to_rgb8(r.bev.rgb, r.bev.resolution, r.bev.resolution));
  std::ostringstream ann;
  for (const auto& a : r.annotations.records) {
    ann << nlohmann::json{{"task", to_string(a.task)}, {"text", a.text}, {"answer", a.answer}, {"targets", a.targets}}.dump() << "\n";
  }
  detail::write_text(dir / "annotations.jsonl", ann.str());
}

inline SceneRecord read_scene(const std::filesystem::path& dir, const std::string& name, const std::string& split, int frames) {
  SceneRecord r;
  r.name = name;
  r.split = split;
  r.spec = scene_from_json(detail::read_json_file(dir / "scene.json"));
  const auto cam_path = dir / "cameras.json";
  if (!std::filesystem::exists(cam_path)) {
    throw std::runtime_error(name + ": camera sidecar " + cam_path.string() + " missing (needed for frame 0)");
  }
  const nlohmann::json cams = detail::read_json_file(cam_path);
  for (int k = 0; k < frames; ++k) {
    const nlohmann::json* cam = nullptr;
    for (const auto& c : cams) {
      if (c.at("index").get<int>() == k) cam = &c;
    }
    if (!cam) throw std::runtime_error(name + ": camera sidecar has no entry for frame " + std::to_string(k));
    PosedFrame f;
    f.index = k;
    auto& K = f.intrinsics;
    K.fx = cam->at("fx");
    K.fy = cam->at("fy");
    K.cx = cam->at("cx");
    K.cy = cam->at("cy");
    K.width = cam->at("width");
    K.height = cam->at("height");
    const auto& rot = cam->at("rotation");
    for (int a = 0; a < 3; ++a) {
      for (int b = 0; b < 3; ++b) f.extrinsics.rotation(a, b) = rot.at(static_cast<std::size_t>(a * 3 + b)).get<double>();
      f.extrinsics.translation[a] = cam->at("translation").at(static_cast<std::size_t>(a)).get<double>();
    }
    const std::string stem = "frame_" + std::to_string(k);
    const RgbImage8 im = read_png((dir / (stem + ".rgb.png")).string());
    if (im.width != K.width || im.height != K.height) throw std::runtime_error(name + ": frame " + std::to_string(k) + " RGB size disagrees with camera");
    f.rgb = to_float(im);
    f.depth = read_depth((dir / (stem + ".depth.raw")).string(), K.height, K.width);
    r.frames.push_back(std::move(f));
  }
  const RgbImage8 bev = read_png((dir / "bev.png").string());
  r.bev.resolution = bev.width;
  r.bev.rgb = to_float(bev);
  const auto ann_path = dir / "annotations.jsonl";
  std::ifstream af(ann_path);
  if (!af) throw std::runtime_error("missing file " + ann_path.string());
  int line_no = 0;
  for (std::string line; std::getline(af, line);) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      AnnotationRecord a;
      a.task = parse_task_tag(j.at("task").get<std::string>());
      a.text = j.at("text").get<std::string>();
      a.answer = j.value("answer", "");
      a.targets = j.at("targets").get<std::vector<int>>();
      for (int t : a.targets) {
        if (!r.spec.find(t)) throw std::runtime_error("unknown object id " + std::to_string(t));
      }
      r.annotations.records.push_back(std::move(a));
    } catch (const std::exception& e) {
      throw std::runtime_error(ann_path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return r;
}

inline void write_dataset(const std::filesystem::path& root, const Dataset& d) {
  std::filesystem::create_directories(root);
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& s : d.scenes) {
    write_scene(root / s.name, s);
    entries.push_back({{"name", s.name}, {"split", s.split}, {"frames", s.frames.size()}});
  }
  detail::write_text(root / "manifest.json", nlohmann::json{{"config", to_json(d.config)}, {"scenes", entries}}.dump(1) + "\n");
}

inline Dataset read_dataset(const std::filesystem::path& root) {
  const nlohmann::json m = detail::read_json_file(root / "manifest.json");
  Dataset d;
  d.config = dataset_config_from_json(m.at("config"));
  for (const auto& e : m.at("scenes")) {
    const std::string name = e.at("name");
    d.scenes.push_back(read_scene(root / name, name, e.at("split"), e.at("frames").get<int>()));
  }
  if (d.scenes.empty()) throw std::runtime_error("dataset " + root.string() + " has no scenes");
  return d;
}

}  // namespace recon3d
