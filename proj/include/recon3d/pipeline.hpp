#pragma once

// File-level pipeline stages behind the command-line tool: scene generation,
// teacher training, training, evaluation, ablations and reports.

#include "recon3d/ablation.hpp"
#include "recon3d/report.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

namespace recon3d {

namespace fs = std::filesystem;

inline void write_json_file(const fs::path& p, const nlohmann::json& j) { detail::write_text(p, j.dump(2) + "\n"); }

struct GenScenesOptions {
  std::uint64_t seed = 0;
  int scenes = 50;
  int eval_scenes = 10;
  int frames = 8;
  int image_size = 64;
  fs::path out;
};

inline Dataset gen_scenes(const GenScenesOptions& o) {
  DatasetConfig c;
  c.seed = o.seed;
  c.scenes = o.scenes;
  c.eval_scenes = o.eval_scenes;
  c.frames = o.frames;
  c.image_size = o.image_size;
  c.bev_resolution = o.image_size;
  Dataset d = generate_dataset(c);
  write_dataset(o.out, d);
  return d;
}

inline TrainConfig load_train_config(const fs::path& path) {
  if (path.empty()) return train_config_from_json(nlohmann::json::object());
  return train_config_from_json(detail::read_json_file(path));
}

// Trains the teacher for `cfg` on `data` and writes it to `out`.
inline TeacherReport train_teacher_to(const TrainConfig& cfg, const Dataset& data, const fs::path& out) {
  TeacherReport rep;
  TrainConfig c = cfg;
  c.teacher_path.clear();
  fs::create_directories(out.parent_path().empty() ? fs::path(".") : out.parent_path());
  obtain_teacher(c, data, out.string(), &rep);
  return rep;
}

inline nlohmann::json teacher_report_json(const TeacherReport& r) {
  return {{"train_mse", r.train_mse}, {"heldout_mse", r.heldout_mse}, {"latent_variance", r.latent_variance}, {"checksum", hex64(r.checksum)}};
}

struct TrainCommandResult {
  TrainResult train;
  fs::path teacher_path;
};

// Writes <out>/config.json, teacher.ckpt (unless the config names one),
// loss_log.jsonl and model.ckpt.
inline TrainCommandResult train_command(const TrainConfig& cfg, const fs::path& data_dir, const fs::path& out) {
  const Dataset data = read_dataset(data_dir);
  fs::create_directories(out);
  write_json_file(out / "config.json", to_json(cfg));
  TrainCommandResult r;
  Teacher teacher = [&] {
    if (!cfg.teacher_path.empty()) {
      r.teacher_path = cfg.teacher_path;
      return Teacher::load(cfg.teacher_path);
    }
    r.teacher_path = out / "teacher.ckpt";
    TeacherReport rep;
    Teacher t = obtain_teacher(cfg, data, r.teacher_path.string(), &rep);
    write_json_file(out / "teacher_report.json", teacher_report_json(rep));
    return t;
  }();
  const Tokenizer tok = Tokenizer::standard();
  const std::vector<PreparedScene> scenes = prepare_scenes(data.split("train"), teacher, tok, cfg.model);
  if (scenes.empty()) throw std::invalid_argument("train: dataset " + data_dir.string() + " has no train scenes");
  const SemiSplit split = regime_split(static_cast<int>(scenes.size()), cfg);
  Model<float> model(cfg.model);
  r.train = train(model, scenes, split.labeled, split.unlabeled, cfg, out);
  return r;
}

// Teacher for a checkpoint: an explicit path, else teacher.ckpt beside the
// checkpoint, else the path recorded in its train config.
inline fs::path resolve_teacher(const fs::path& ckpt, const nlohmann::json& extra, const fs::path& explicit_path) {
  if (!explicit_path.empty()) return explicit_path;
  const fs::path sibling = ckpt.parent_path() / "teacher.ckpt";
  if (fs::exists(sibling)) return sibling;
  if (extra.contains("train_config")) {
    const std::string p = extra.at("train_config").value("teacher_path", "");
    if (!p.empty()) return p;
  }
  throw std::runtime_error("eval: no teacher found for " + ckpt.string() + " (pass --teacher)");
}

inline nlohmann::json eval_command(const fs::path& ckpt, const fs::path& data_dir, const std::string& split, const fs::path& teacher_path = {},
                                   const fs::path& out = {}) {
  nlohmann::json extra;
  const auto model = Model<float>::load(ckpt.string(), &extra);
  const Teacher teacher = Teacher::load(resolve_teacher(ckpt, extra, teacher_path).string());
  const Dataset data = read_dataset(data_dir);
  const auto records = data.split(split);
  if (records.empty()) throw std::invalid_argument("eval: split '" + split + "' of " + data_dir.string() + " is empty");
  const Tokenizer tok = Tokenizer::standard();
  const std::vector<PreparedScene> scenes = prepare_scenes(records, teacher, tok, model->config());
  const EvalOutput e = evaluate(*model, teacher, tok, scenes, true);
  e.metrics.validate();
  nlohmann::json j = eval_details_json(e);
  j["split"] = split;
  j["checkpoint"] = ckpt.filename().string();
  const fs::path dst = out.empty() ? ckpt.parent_path() / "metrics.json" : out;
  write_json_file(dst, j);
  return j;
}

struct AblationInputs {
  Dataset data;
  std::optional<Teacher> teacher;
};

// Data and teacher for a grid: "data" names a dataset directory, otherwise
// "dataset" holds a generation config. "teacher_path" is reused when it
// exists; a freshly trained teacher is written to <out>/teacher.ckpt.
inline AblationInputs ablation_inputs(const nlohmann::json& grid_json, const AblationGrid& grid, const fs::path& out,
                                      const fs::path& base_dir) {
  AblationInputs in;
  if (grid_json.contains("data")) {
    fs::path p = grid_json.at("data").get<std::string>();
    if (p.is_relative()) p = base_dir / p;
    in.data = read_dataset(p);
  } else {
    in.data = generate_dataset(dataset_config_from_json(grid_json.value("dataset", nlohmann::json::object())));
  }
  const TrainConfig base = train_config_from_json(grid.base);
  fs::path teacher_path = grid_json.value("teacher_path", std::string{});
  if (!teacher_path.empty() && teacher_path.is_relative()) teacher_path = base_dir / teacher_path;
  if (!teacher_path.empty() && fs::exists(teacher_path)) {
    in.teacher.emplace(Teacher::load(teacher_path.string()));
  } else {
    TrainConfig c = base;
    c.teacher_path.clear();
    const fs::path dst = teacher_path.empty() ? out / "teacher.ckpt" : teacher_path;
    fs::create_directories(dst.parent_path());
    in.teacher.emplace(obtain_teacher(c, in.data, dst.string()));
  }
  return in;
}

inline AblationResult ablate_command(const fs::path& grid_path, const fs::path& out, std::ostream* progress = nullptr) {
  const nlohmann::json gj = detail::read_json_file(grid_path);
  const AblationGrid grid = AblationGrid::from_json(gj);
  fs::create_directories(out);
  AblationInputs in = ablation_inputs(gj, grid, out, grid_path.parent_path());
  const Tokenizer tok = Tokenizer::standard();
  const ModelConfig mc = train_config_from_json(grid.base).model;
  const auto train_scenes = prepare_scenes(in.data.split("train"), *in.teacher, tok, mc);
  const auto eval_scenes = prepare_scenes(in.data.split("eval"), *in.teacher, tok, mc);
  if (train_scenes.empty() || eval_scenes.empty()) throw std::invalid_argument("ablate: need nonempty train and eval splits");
  AblationProgress cb;
  if (progress) {
    cb = [progress](const std::string& arm, std::uint64_t seed, const Metrics& m) {
      *progress << arm << " seed " << seed << ": " << m.to_json().dump() << std::endl;
    };
  }
  const AblationResult r = run_ablation(grid, train_scenes, eval_scenes, *in.teacher, tok, cb, out);
  write_json_file(out / "grid.json", gj);
  write_json_file(out / "ablation.json", to_json(r));
  detail::write_text(out / "table.md", ablation_table(r));
  return r;
}

}  // namespace recon3d
