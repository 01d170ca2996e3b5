#pragma once

// Training: per-scene preprocessing (video tokens geometry, teacher targets,
// proposals, text), loss routing by task and supervision regime, the Δt
// schedule for the 3D objectives, and the optimization loop with JSONL
// loss logging.

#include "recon3d/dataset.hpp"
#include "recon3d/model.hpp"
#include "recon3d/optim.hpp"
#include "recon3d/teacher.hpp"
#include "recon3d/tokenizer.hpp"

#include <nlohmann/json.hpp>

#include <array>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace recon3d {

enum class Regime { labeled, unlabeled };

inline const char* to_string(Regime r) { return r == Regime::labeled ? "labeled" : "unlabeled"; }

inline bool should_apply_3d(long step, int delta_t) {
  if (step < 0) throw std::invalid_argument("should_apply_3d: negative step");
  if (delta_t < 1) throw std::invalid_argument("should_apply_3d: delta_t must be >= 1");
  return step % delta_t == 0;
}

struct ActiveLosses {
  bool text = false, vanilla = false, cross = false, global = false, ground = false;
  bool any() const { return text || vanilla || cross || global || ground; }
  bool operator==(const ActiveLosses&) const = default;
};

// Routing table: labeled qa/caption get text plus the 3D pair on 3D steps,
// labeled grounding gets the grounding loss alone, unlabeled samples get the
// 3D pair on 3D steps and nothing otherwise.
inline ActiveLosses route_losses(TaskTag tag, Regime regime, long step, int delta_t) {
  ActiveLosses a;
  const bool step3d = should_apply_3d(step, delta_t);
  if (regime == Regime::unlabeled) {
    a.cross = a.global = step3d;
    return a;
  }
  switch (tag) {
    case TaskTag::qa:
    case TaskTag::caption:
      a.text = true;
      a.cross = a.global = step3d;
      return a;
    case TaskTag::ground:
      a.ground = true;
      return a;
  }
  throw std::invalid_argument("route_losses: unknown task tag");
}

struct TrainConfig {
  double gamma = 0.25;
  int delta_t = 4;
  double lambda_cross = 0.5;
  double lambda_global = 0.5;
  double lambda_vanilla = 0.5;
  // Which reconstruction objectives this run uses (ablation arms).
  bool use_cross = true;
  bool use_global = true;
  bool use_vanilla = false;
  // When false the global-view loss runs on every step its routing allows.
  bool schedule_global = true;
  double lr = 1e-4;
  double lr_floor = 0.1;  // final lr as a fraction of the peak
  double warmup_fraction = 0.05;
  double weight_decay = 0.01;
  double grad_clip = 1.0;
  int steps = 200;
  int batch_size = 1;
  std::uint64_t seed = 0;
  double labeled_fraction = 1.0;
  bool unlabeled_3d = true;  // apply the 3D losses to the unlabeled split
  std::vector<TaskTag> tasks{TaskTag::qa, TaskTag::caption, TaskTag::ground};
  bool freeze_vision = false;
  int checkpoint_every = 0;
  ModelConfig model;
  std::string teacher_path;  // empty: train a teacher on the dataset
  TeacherConfig teacher;
  bool teacher_enforce_threshold = true;

  void validate() const {
    if (gamma < 0 || gamma >= 1) throw std::invalid_argument("train config: gamma must lie in [0, 1)");
    if (delta_t < 1) throw std::invalid_argument("train config: delta_t must be >= 1");
    if (labeled_fraction < 0 || labeled_fraction > 1) throw std::invalid_argument("train config: labeled_fraction outside [0, 1]");
    if (steps < 0) throw std::invalid_argument("train config: negative step count");
    if (batch_size < 1) throw std::invalid_argument("train config: batch_size must be >= 1");
    if (tasks.empty()) throw std::invalid_argument("train config: no tasks");
  }
};

// Final routing for one sample under a run's arm switches.
inline ActiveLosses active_losses(const TrainConfig& cfg, TaskTag tag, Regime regime, long step) {
  ActiveLosses a = route_losses(tag, regime, step, cfg.delta_t);
  const bool step3d = should_apply_3d(step, cfg.delta_t);
  const bool global_ok = cfg.schedule_global ? a.global : (regime == Regime::unlabeled || tag != TaskTag::ground);
  // Vanilla reconstruction follows the same schedule and routing as the
  // 3D pair, but of the unmasked input views.
  a.vanilla = cfg.use_vanilla && step3d && (regime == Regime::unlabeled || tag != TaskTag::ground);
  a.cross = cfg.use_cross && a.cross;
  a.global = cfg.use_global && global_ok;
  if (regime == Regime::unlabeled && !cfg.unlabeled_3d) a = {};
  return a;
}

inline nlohmann::json to_json(const TeacherConfig& t) {
  return {{"c1", t.c1}, {"c2", t.c2}, {"latent_dim", t.latent_dim}, {"kl_weight", t.kl_weight}, {"steps", t.steps},
          {"batch", t.batch}, {"lr", t.lr}, {"mse_threshold", t.mse_threshold}, {"dim_fraction", t.dim_fraction}, {"seed", t.seed}};
}

inline nlohmann::json to_json(const TrainConfig& c) {
  std::vector<std::string> tasks;
  for (auto t : c.tasks) tasks.emplace_back(to_string(t));
  return {{"gamma", c.gamma}, {"delta_t", c.delta_t}, {"lambda_cross", c.lambda_cross}, {"lambda_global", c.lambda_global},
          {"lambda_vanilla", c.lambda_vanilla}, {"use_cross", c.use_cross}, {"use_global", c.use_global},
          {"use_vanilla", c.use_vanilla}, {"schedule_global", c.schedule_global}, {"lr", c.lr}, {"lr_floor", c.lr_floor},
          {"warmup_fraction", c.warmup_fraction}, {"weight_decay", c.weight_decay}, {"grad_clip", c.grad_clip},
          {"steps", c.steps}, {"batch_size", c.batch_size}, {"seed", c.seed}, {"labeled_fraction", c.labeled_fraction},
          {"unlabeled_3d", c.unlabeled_3d}, {"tasks", tasks}, {"freeze_vision", c.freeze_vision},
          {"checkpoint_every", c.checkpoint_every}, {"model", to_json(c.model)}, {"teacher_path", c.teacher_path},
          {"teacher", to_json(c.teacher)}, {"teacher_enforce_threshold", c.teacher_enforce_threshold}};
}

// Missing keys keep their defaults. RECON3D_SEED, when set, overrides the seed.
inline TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig c = {}) {
  auto get = [](const nlohmann::json& o, const char* k, auto& v) {
    if (o.contains(k)) v = o.at(k).get<std::decay_t<decltype(v)>>();
  };
  static const std::set<std::string> known{"gamma", "delta_t", "lambda_cross", "lambda_global", "lambda_vanilla", "use_cross",
                                           "use_global", "use_vanilla", "schedule_global", "lr", "lr_floor", "warmup_fraction",
                                           "weight_decay", "grad_clip", "steps", "batch_size", "seed", "labeled_fraction",
                                           "unlabeled_3d", "tasks", "freeze_vision", "checkpoint_every", "model",
                                           "teacher_path", "teacher", "teacher_enforce_threshold"};
  for (const auto& [k, v] : j.items()) {
    if (!known.count(k)) throw std::invalid_argument("train config: unknown key '" + k + "'");
  }
  get(j, "gamma", c.gamma);
  get(j, "delta_t", c.delta_t);
  get(j, "lambda_cross", c.lambda_cross);
  get(j, "lambda_global", c.lambda_global);
  get(j, "lambda_vanilla", c.lambda_vanilla);
  get(j, "use_cross", c.use_cross);
  get(j, "use_global", c.use_global);
  get(j, "use_vanilla", c.use_vanilla);
  get(j, "schedule_global", c.schedule_global);
  get(j, "lr", c.lr);
  get(j, "lr_floor", c.lr_floor);
  get(j, "warmup_fraction", c.warmup_fraction);
  get(j, "weight_decay", c.weight_decay);
  get(j, "grad_clip", c.grad_clip);
  get(j, "steps", c.steps);
  get(j, "batch_size", c.batch_size);
  get(j, "seed", c.seed);
  get(j, "labeled_fraction", c.labeled_fraction);
  get(j, "unlabeled_3d", c.unlabeled_3d);
  if (j.contains("tasks")) {
    c.tasks.clear();
    for (const auto& t : j.at("tasks")) c.tasks.push_back(parse_task_tag(t.get<std::string>()));
  }
  get(j, "freeze_vision", c.freeze_vision);
  get(j, "checkpoint_every", c.checkpoint_every);
  if (j.contains("model")) c.model = model_config_from_json(j.at("model"), c.model);
  get(j, "teacher_path", c.teacher_path);
  if (j.contains("teacher")) {
    const auto& t = j.at("teacher");
    get(t, "c1", c.teacher.c1);
    get(t, "c2", c.teacher.c2);
    get(t, "latent_dim", c.teacher.latent_dim);
    get(t, "kl_weight", c.teacher.kl_weight);
    get(t, "steps", c.teacher.steps);
    get(t, "batch", c.teacher.batch);
    get(t, "lr", c.teacher.lr);
    get(t, "mse_threshold", c.teacher.mse_threshold);
    get(t, "dim_fraction", c.teacher.dim_fraction);
    get(t, "seed", c.teacher.seed);
  }
  get(j, "teacher_enforce_threshold", c.teacher_enforce_threshold);
  if (const char* env = std::getenv("RECON3D_SEED"); env && *env) c.seed = std::stoull(env);
  c.validate();
  return c;
}

// Scene-level split; deterministic in (count, fraction, seed).
struct SemiSplit {
  std::vector<int> labeled, unlabeled;  // indices into the input list, ascending
};

inline SemiSplit split_semi(int count, double fraction, std::uint64_t seed) {
  if (!(fraction > 0 && fraction < 1)) throw std::invalid_argument("split_semi: fraction must lie in (0, 1)");
  const int n_lab = static_cast<int>(std::lround(fraction * count));
  if (n_lab == 0 || n_lab == count) {
    throw std::invalid_argument("split_semi: fraction " + std::to_string(fraction) + " of " + std::to_string(count) +
                                " scenes leaves an empty subset");
  }
  std::vector<int> order(static_cast<std::size_t>(count));
  std::iota(order.begin(), order.end(), 0);
  Rng rng(splitmix64(seed ^ 0x5e1175eedULL));
  std::shuffle(order.begin(), order.end(), rng);
  SemiSplit s;
  s.labeled.assign(order.begin(), order.begin() + n_lab);
  s.unlabeled.assign(order.begin() + n_lab, order.end());
  std::sort(s.labeled.begin(), s.labeled.end());
  std::sort(s.unlabeled.begin(), s.unlabeled.end());
  return s;
}

// ---------------------------------------------------------------------------
// Per-scene preprocessing

struct TextItem {
  const AnnotationRecord* record = nullptr;
  TextSequence text;
};

struct PreparedScene {
  const SceneRecord* record = nullptr;
  VideoInput video;
  std::vector<Mat<float>> view_latents;  // per frame, (h*w) x d
  Mat<float> bev_latent;
  std::vector<std::uint8_t> bev_valid;   // per BEV latent token
  std::vector<std::uint8_t> bev_pixel_valid;
  std::vector<ObjectProposal> proposals;
  std::map<TaskTag, std::vector<TextItem>> items;

  const std::vector<TextItem>& of(TaskTag t) const {
    static const std::vector<TextItem> none;
    auto it = items.find(t);
    return it == items.end() ? none : it->second;
  }
};

// Point cloud of all frames, splatted top-down, gives the BEV occupancy.
inline BevSplat fused_bev(const SceneRecord& r, int resolution) {
  std::vector<ColoredPoint> pts;
  for (const auto& f : r.frames) {
    const PointMap pm = unproject_frame(f);
    for (std::size_t k = 0; k < pm.coords.size(); ++k) {
      if (!pm.valid[k]) continue;
      pts.push_back({pm.coords[k], Eigen::Vector3f(f.rgb[k * 3], f.rgb[k * 3 + 1], f.rgb[k * 3 + 2])});
    }
  }
  return project_to_bev(pts, r.spec.bev_config(resolution));
}

inline PreparedScene prepare_scene(const SceneRecord& r, const Teacher& teacher, const Tokenizer& tok, const ModelConfig& mc) {
  const auto& bc = mc.backbone;
  const auto& dc = mc.denoiser;
  if (static_cast<int>(r.frames.size()) != bc.views) {
    throw std::invalid_argument(r.name + ": " + std::to_string(r.frames.size()) + " frames, model expects " + std::to_string(bc.views));
  }
  if (tok.size() > bc.vocab) {
    throw std::invalid_argument("tokenizer has " + std::to_string(tok.size()) + " tokens, model vocab is " + std::to_string(bc.vocab));
  }
  PreparedScene p;
  p.record = &r;
  p.video = build_video_input(r.frames, bc.patch, bc.dim, bc.band);
  for (const auto& f : r.frames) {
    LatentGrid g = teacher.encode(f.rgb, f.height(), f.width(), LatentSource::view);
    if (g.height != dc.latent_height || g.width != dc.latent_width || g.channels != dc.latent_dim) {
      throw std::invalid_argument(r.name + ": teacher latent grid does not match the denoiser configuration");
    }
    p.view_latents.push_back(std::move(g.tokens));
  }
  const int res = r.bev.resolution;
  LatentGrid bev = teacher.encode(r.bev.rgb, res, res, LatentSource::bev);
  if (bev.height != dc.latent_height || bev.width != dc.latent_width) {
    throw std::invalid_argument(r.name + ": BEV latent grid does not match the denoiser configuration");
  }
  p.bev_latent = std::move(bev.tokens);
  const BevSplat splat = fused_bev(r, res);
  p.bev_pixel_valid = splat.occupancy;
  p.bev_valid = blank_mask(splat.image, splat.occupancy, Teacher::kStride);
  p.proposals = make_proposals(r.spec, r.spec.seed);
  for (const auto& a : r.annotations.records) {
    TextItem it{&a, build_text(tok, a)};
    if (static_cast<int>(it.text.ids.size()) > bc.max_text) {
      throw std::invalid_argument(r.name + ": text '" + a.text + "' longer than max_text");
    }
    p.items[a.task].push_back(std::move(it));
  }
  return p;
}

inline std::vector<PreparedScene> prepare_scenes(const std::vector<const SceneRecord*>& scenes, const Teacher& teacher,
                                                 const Tokenizer& tok, const ModelConfig& mc) {
  std::vector<PreparedScene> out;
  out.reserve(scenes.size());
  for (const auto* s : scenes) out.push_back(prepare_scene(*s, teacher, tok, mc));
  return out;
}

inline GroundingSample grounding_sample(const PreparedScene& p, const TextItem& it) {
  return {p.proposals, it.record->targets, it.text.ground_position};
}

// ---------------------------------------------------------------------------
// Loss assembly for one sample

template <class T>
struct SampleLosses {
  TextLoss<T> text;
  ReconLoss<T> vanilla, cross, global;
  Var<T> ground;
  bool ground_applied = false;
  Var<T> total;  // weighted sum of the applied terms; unset when none applies
  std::vector<int> masked_views;
};

struct LossWeights {
  double cross = 0.5, global = 0.5, vanilla = 0.5;
};

// Builds the graph for one (scene, tag) sample. 3D steps use the masked
// video for the whole forward pass, text included.
template <class T>
SampleLosses<T> sample_losses(Tape<T>& tape, const Model<T>& model, const PreparedScene& scene, TaskTag tag,
                              const ActiveLosses& active, double gamma, const LossWeights& w, Rng& mask_rng, Rng& diffusion_rng) {
  SampleLosses<T> out;
  if (!active.any()) return out;
  const auto& bb = model.backbone();
  const int views = scene.video.views;
  ViewMask mask = ViewMask::all_visible(views);
  if ((active.cross || active.global) && gamma > 0) mask = sample_view_mask(views, gamma, mask_rng);
  out.masked_views = mask.masked_views();

  std::vector<TextSegment> segments;
  std::vector<const TextItem*> used;
  if (active.text || active.ground) {
    for (const auto& it : scene.of(tag)) {
      if (active.ground && it.record->targets.empty()) continue;
      segments.push_back({it.text.ids, active.text ? it.text.targets : std::vector<int>(it.text.ids.size(), -1)});
      used.push_back(&it);
    }
  }
  const VisualTokens<T> vis = bb.embed_video(tape, scene.video, mask);
  const LmOutput<T> lm = bb.forward(tape, vis.tokens, segments);

  auto accumulate = [&](Var<T> term, double weight) {
    Var<T> t = weight == 1.0 ? term : scale(term, static_cast<T>(weight));
    out.total = out.total ? add(out.total, t) : t;
  };

  if (active.text) {
    std::vector<int> targets;
    for (const auto& s : segments) targets.insert(targets.end(), s.targets.begin(), s.targets.end());
    out.text = text_loss(tape, lm.text_logits, targets);
    if (out.text.applied) accumulate(out.text.value, 1.0);
  }
  if (active.ground) {
    Var<T> sum;
    int n = 0;
    for (std::size_t k = 0; k < used.size(); ++k) {
      const GroundingSample gs = grounding_sample(scene, *used[k]);
      const int row = lm.segment_offsets[k] + gs.ground_position;
      const GroundingForward<T> g = grounding_forward(tape, model.grounding(), lm, scene.video.tokens, gs, row, bb.config().band);
      Var<T> l = grounding_loss(g.logits, target_columns(g.ids, gs.targets));
      sum = sum ? add(sum, l) : l;
      ++n;
    }
    if (n > 0) {
      out.ground = scale(sum, T(1) / static_cast<T>(n));
      out.ground_applied = true;
      accumulate(out.ground, 1.0);
    }
  }
  if (active.cross || active.global || active.vanilla) {
    auto latents = [&](const Mat<float>& m) { return Mat<T>(m.template cast<T>()); };
    std::vector<Mat<T>> views_t;
    for (const auto& z : scene.view_latents) views_t.push_back(latents(z));
    const Denoiser<T>& dv = model.denoiser(LatentSource::view);
    const Denoiser<T>& dg = model.denoiser(LatentSource::bev);
    Var<T> base_v = dv.condition_base(tape, lm.visual_hidden);
    Var<T> base_g = &dg == &dv ? base_v : dg.condition_base(tape, lm.visual_hidden);
    if (active.cross) {
      out.cross = cross_view_loss(tape, dv, base_v, mask, views_t, diffusion_rng);
      if (out.cross.applied) accumulate(out.cross.value, w.cross);
    }
    if (active.global) {
      out.global = global_view_loss(tape, dg, base_g, latents(scene.bev_latent), scene.bev_valid, diffusion_rng);
      if (out.global.applied) accumulate(out.global.value, w.global);
    }
    if (active.vanilla) {
      // Vanilla targets are the inputs themselves, so it needs the unmasked
      // visual outputs.
      Var<T> base = base_v;
      if (!out.masked_views.empty()) {
        const LmOutput<T> full = bb.forward(tape, bb.embed_video(tape, scene.video, ViewMask::all_visible(views)).tokens, {});
        base = dv.condition_base(tape, full.visual_hidden);
      }
      out.vanilla = vanilla_loss(tape, dv, base, views_t, diffusion_rng);
      if (out.vanilla.applied) accumulate(out.vanilla.value, w.vanilla);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Batches

struct TrainSample {
  int scene = 0;  // index into the prepared scene list
  TaskTag tag = TaskTag::qa;
  Regime regime = Regime::labeled;
};

// Each step draws one task tag, chosen so that tags are consumed in
// proportion to how many (scene, tag) groups they have; within a tag the
// groups cycle through per-epoch shuffles. Unlabeled scenes are appended on
// 3D steps only, since they carry no loss otherwise.
class BatchSchedule {
 public:
  BatchSchedule(const std::vector<PreparedScene>& scenes, const std::vector<int>& labeled, const std::vector<int>& unlabeled,
                const TrainConfig& cfg)
      : cfg_(cfg), rng_(splitmix64(cfg.seed ^ 0xba7c4ULL)), unlabeled_(unlabeled) {
    for (TaskTag t : cfg.tasks) {
      std::vector<int> ids;
      for (int s : labeled) {
        const auto& items = scenes[static_cast<std::size_t>(s)].of(t);
        const bool usable = t != TaskTag::ground ||
                            std::any_of(items.begin(), items.end(), [](const TextItem& i) { return !i.record->targets.empty(); });
        if (!items.empty() && usable) ids.push_back(s);
      }
      if (!ids.empty()) tags_.push_back({t, ids, {}, 0, 0});
    }
    if (tags_.empty() && (unlabeled_.empty() || !cfg.unlabeled_3d)) throw std::invalid_argument("train: no usable training samples");
  }

  std::vector<TrainSample> next(long step) {
    std::vector<TrainSample> batch;
    if (!tags_.empty()) {
      std::size_t pick = 0;
      for (std::size_t k = 1; k < tags_.size(); ++k) {
        // consumed_k / size_k < consumed_pick / size_pick, cross-multiplied.
        if (tags_[k].consumed * static_cast<long>(tags_[pick].groups.size()) <
            tags_[pick].consumed * static_cast<long>(tags_[k].groups.size())) {
          pick = k;
        }
      }
      auto& tg = tags_[pick];
      for (int b = 0; b < cfg_.batch_size; ++b) batch.push_back({draw(tg.groups, tg.order, tg.cursor), tg.tag, Regime::labeled});
      tg.consumed += cfg_.batch_size;
    }
    if (!unlabeled_.empty() && cfg_.unlabeled_3d && should_apply_3d(step, cfg_.delta_t)) {
      for (int b = 0; b < cfg_.batch_size; ++b) batch.push_back({draw(unlabeled_, unl_order_, unl_cursor_), TaskTag::qa, Regime::unlabeled});
    }
    return batch;
  }

 private:
  struct TagStream {
    TaskTag tag;
    std::vector<int> groups;
    std::vector<int> order;
    std::size_t cursor;
    long consumed;
  };

  int draw(const std::vector<int>& pool, std::vector<int>& order, std::size_t& cursor) {
    if (cursor >= order.size()) {
      order = pool;
      std::shuffle(order.begin(), order.end(), rng_);
      cursor = 0;
    }
    return order[cursor++];
  }

  TrainConfig cfg_;
  Rng rng_;
  std::vector<TagStream> tags_;
  std::vector<int> unlabeled_;
  std::vector<int> unl_order_;
  std::size_t unl_cursor_ = 0;
};

// ---------------------------------------------------------------------------
// Loop

struct LossRecord {
  double value = 0;
  bool applied = false;
};

struct LossBundle {
  long step = 0;
  double lr = 0;
  double total = 0;
  double grad_norm = 0;
  LossRecord text, vanilla2d, cross, global, ground;
  nlohmann::json batch = nlohmann::json::array();

  nlohmann::json to_json() const {
    auto rec = [](const LossRecord& r) { return r.applied ? nlohmann::json(r.value) : nlohmann::json(nullptr); };
    return {{"step", step},
            {"lr", lr},
            {"total", total},
            {"grad_norm", grad_norm},
            {"losses", {{"text", rec(text)}, {"vanilla2d", rec(vanilla2d)}, {"cross", rec(cross)}, {"global", rec(global)}, {"ground", rec(ground)}}},
            {"flags",
             {{"text", text.applied}, {"vanilla2d", vanilla2d.applied}, {"cross", cross.applied}, {"global", global.applied},
              {"ground", ground.applied}}},
            {"batch", batch}};
  }
};

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainResult {
  std::vector<LossBundle> log;
  std::uint64_t model_checksum = 0;
  int steps_with_3d = 0;
  int applications_3d = 0;  // sample-level cross/global applications
};

struct TrainHooks {
  // Called after backward, before the optimizer update.
  std::function<void(long step, const Model<float>&, const std::vector<TrainSample>&)> after_backward;
};

// Runs the optimization loop over prepared scenes. `labeled` and `unlabeled`
// index into `scenes`. When `out_dir` is nonempty the loss log, periodic
// checkpoints, the final checkpoint and a NaN dump (on divergence) go there.
inline TrainResult train(Model<float>& model, const std::vector<PreparedScene>& scenes, const std::vector<int>& labeled,
                         const std::vector<int>& unlabeled, const TrainConfig& cfg, const std::filesystem::path& out_dir = {},
                         const TrainHooks& hooks = {}) {
  cfg.validate();
  if (scenes.empty()) throw std::invalid_argument("train: empty dataset");
  if (cfg.freeze_vision) {
    for (auto& p : model.params().all()) {
      if (p.name.rfind("vis.patch_embed", 0) == 0) p.trainable = false;
    }
  }
  BatchSchedule schedule(scenes, labeled, unlabeled, cfg);
  Rng mask_rng(splitmix64(cfg.seed ^ 0x3a5cULL));
  Rng diffusion_rng(splitmix64(cfg.seed ^ 0xd1ffULL));
  AdamWOptions opts;
  opts.weight_decay = cfg.weight_decay;
  opts.grad_clip = cfg.grad_clip;
  AdamW<float> opt(opts);
  const LossWeights weights{cfg.lambda_cross, cfg.lambda_global, cfg.lambda_vanilla};
  const int warmup = static_cast<int>(std::lround(cfg.warmup_fraction * cfg.steps));

  std::ofstream log_file;
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    log_file.open(out_dir / "loss_log.jsonl");
    if (!log_file) throw std::runtime_error("cannot write " + (out_dir / "loss_log.jsonl").string());
  }

  TrainResult result;
  for (long step = 0; step < cfg.steps; ++step) {
    const std::vector<TrainSample> batch = schedule.next(step);
    model.params().zero_grad();
    Tape<float> tape;
    LossBundle bundle;
    bundle.step = step;
    struct Acc {
      double sum = 0;
      int n = 0;
      void add(double v) {
        sum += v;
        ++n;
      }
      LossRecord rec() const { return n ? LossRecord{sum / n, true} : LossRecord{}; }
    } acc_text, acc_van, acc_cross, acc_global, acc_ground;
    Var<float> total;
    int contributing = 0;
    bool any3d = false;
    for (const auto& s : batch) {
      const PreparedScene& ps = scenes[static_cast<std::size_t>(s.scene)];
      const ActiveLosses active = active_losses(cfg, s.tag, s.regime, step);
      SampleLosses<float> sl = sample_losses(tape, model, ps, s.tag, active, cfg.gamma, weights, mask_rng, diffusion_rng);
      nlohmann::json entry = {{"scene", ps.record->name}, {"tag", to_string(s.tag)}, {"regime", to_string(s.regime)},
                              {"masked", sl.masked_views}};
      bundle.batch.push_back(entry);
      if (sl.text.applied) acc_text.add(sl.text.value.item());
      if (sl.vanilla.applied) acc_van.add(sl.vanilla.value.item());
      if (sl.cross.applied) acc_cross.add(sl.cross.value.item());
      if (sl.global.applied) acc_global.add(sl.global.value.item());
      if (sl.ground_applied) acc_ground.add(sl.ground.item());
      if (sl.cross.applied || sl.global.applied) {
        any3d = true;
        ++result.applications_3d;
      }
      if (sl.total) {
        total = total ? add(total, sl.total) : sl.total;
        ++contributing;
      }
    }
    bundle.text = acc_text.rec();
    bundle.vanilla2d = acc_van.rec();
    bundle.cross = acc_cross.rec();
    bundle.global = acc_global.rec();
    bundle.ground = acc_ground.rec();
    result.steps_with_3d += any3d ? 1 : 0;
    const double lr = warmup_cosine_lr(static_cast<int>(step), cfg.steps, warmup, cfg.lr, cfg.lr_floor);
    bundle.lr = lr;
    if (total) {
      total = scale(total, 1.0f / static_cast<float>(contributing));
      bundle.total = total.item();
      if (!std::isfinite(bundle.total)) {
        nlohmann::json dump = bundle.to_json();
        dump["reason"] = "non-finite total loss";
        if (!out_dir.empty()) detail::write_text(out_dir / "nan_dump.json", dump.dump(1) + "\n");
        throw TrainingDiverged("non-finite loss at step " + std::to_string(step) + "; batch: " + bundle.batch.dump());
      }
      tape.backward(total);
      if (hooks.after_backward) hooks.after_backward(step, model, batch);
      bundle.grad_norm = opt.step(model.params(), lr);
    }
    if (log_file.is_open()) log_file << bundle.to_json().dump() << "\n";
    result.log.push_back(std::move(bundle));
    if (!out_dir.empty() && cfg.checkpoint_every > 0 && step > 0 && step % cfg.checkpoint_every == 0) {
      model.save((out_dir / ("model_step" + std::to_string(step) + ".ckpt")).string(), {{"step", step}});
    }
  }
  if (!out_dir.empty()) {
    result.model_checksum = model.save((out_dir / "model.ckpt").string(), {{"steps", cfg.steps}, {"train_config", to_json(cfg)}});
  }
  return result;
}

// Teacher from `cfg.teacher_path` when it exists; otherwise trained on the
// train split's frames and BEV images (held out: eval split) and written to
// `save_path` when that is nonempty.
inline Teacher obtain_teacher(const TrainConfig& cfg, const Dataset& data, const std::string& save_path = {},
                              TeacherReport* report = nullptr) {
  if (!cfg.teacher_path.empty() && std::filesystem::exists(cfg.teacher_path)) return Teacher::load(cfg.teacher_path);
  std::vector<std::vector<float>> train_images, heldout;
  int size = 0;
  for (const auto& s : data.scenes) {
    auto& dst = s.split == "eval" ? heldout : train_images;
    for (const auto& f : s.frames) {
      dst.push_back(f.rgb);
      size = f.height();
    }
    if (s.bev.resolution == size) dst.push_back(s.bev.rgb);
  }
  Teacher t = Teacher::train(train_images, heldout, size, size, cfg.teacher, report, cfg.teacher_enforce_threshold);
  if (!save_path.empty()) t.save(save_path);
  return t;
}

// Labeled and unlabeled index lists over the train split for a config.
inline SemiSplit regime_split(int train_count, const TrainConfig& cfg) {
  if (cfg.labeled_fraction >= 1.0) {
    SemiSplit s;
    s.labeled.resize(static_cast<std::size_t>(train_count));
    std::iota(s.labeled.begin(), s.labeled.end(), 0);
    return s;
  }
  return split_semi(train_count, cfg.labeled_fraction, cfg.seed);
}

}  // namespace recon3d
