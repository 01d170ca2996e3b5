#pragma once

// Shared toy-scale setup: 32 px frames, 4 views, a 2-layer backbone and a
// briefly trained teacher. Built once per process.

#include "recon3d/eval.hpp"

#include <memory>
#include <optional>

namespace fixture {

using namespace recon3d;

inline ModelConfig toy_model(int vocab) {
  ModelConfig m;
  auto& b = m.backbone;
  b.image_size = 32;
  b.views = 4;
  b.patch = 8;
  b.dim = 24;
  b.layers = 2;
  b.heads = 2;
  b.mlp_hidden = 32;
  b.vocab = vocab;
  auto& d = m.denoiser;
  d.width = 24;
  d.heads = 2;
  d.blocks = 1;
  d.queries = 4;
  d.mlp_hidden = 32;
  d.latent_height = 4;
  d.latent_width = 4;
  return m.sync();
}

inline DatasetConfig toy_data(int scenes = 6, int eval_scenes = 2) {
  DatasetConfig dc;
  dc.scenes = scenes;
  dc.eval_scenes = eval_scenes;
  dc.frames = 4;
  dc.image_size = 32;
  dc.bev_resolution = 32;
  return dc;
}

// Frames repeated until there are enough teacher training images.
inline std::vector<std::vector<float>> teacher_images(const Dataset& d, std::size_t at_least = 100) {
  std::vector<std::vector<float>> imgs;
  while (imgs.size() < at_least) {
    for (const auto& s : d.scenes) {
      for (const auto& f : s.frames) imgs.push_back(f.rgb);
    }
  }
  return imgs;
}

struct Toy {
  Dataset data;
  Tokenizer tok = Tokenizer::standard();
  std::optional<Teacher> teacher;
  ModelConfig model;
  std::vector<PreparedScene> train, eval;
};

inline Toy& toy() {
  static std::unique_ptr<Toy> t = [] {
    auto p = std::make_unique<Toy>();
    p->data = generate_dataset(toy_data());
    TeacherConfig tc;
    tc.steps = 20;
    p->teacher.emplace(Teacher::train(teacher_images(p->data), {}, 32, 32, tc, nullptr, false));
    p->model = toy_model(p->tok.size());
    p->train = prepare_scenes(p->data.split("train"), *p->teacher, p->tok, p->model);
    p->eval = prepare_scenes(p->data.split("eval"), *p->teacher, p->tok, p->model);
    return p;
  }();
  return *t;
}

}  // namespace fixture
