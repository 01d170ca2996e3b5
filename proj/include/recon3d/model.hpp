#pragma once

// The full trainable model: backbone, reconstruction denoiser(s) and the
// grounding head, sharing one parameter set.

#include "recon3d/backbone.hpp"
#include "recon3d/checkpoint.hpp"
#include "recon3d/denoiser.hpp"
#include "recon3d/grounding.hpp"

#include <nlohmann/json.hpp>

#include <memory>
#include <string>

namespace recon3d {

struct ModelConfig {
  BackboneConfig backbone;
  DenoiserConfig denoiser;
  bool shared_denoiser = true;  // one denoiser for view and BEV targets
  double ground_temperature = 0.07;
  std::uint64_t init_seed = 0;

  // Keeps the denoiser's condition width in step with the backbone.
  ModelConfig& sync() {
    denoiser.cond_dim = backbone.dim;
    return *this;
  }
};

inline nlohmann::json to_json(const ModelConfig& c) {
  const auto& b = c.backbone;
  const auto& d = c.denoiser;
  return {{"backbone",
           {{"image_size", b.image_size}, {"patch", b.patch}, {"views", b.views}, {"dim", b.dim}, {"layers", b.layers},
            {"heads", b.heads}, {"mlp_hidden", b.mlp_hidden}, {"vocab", b.vocab}, {"max_text", b.max_text},
            {"min_wavelength", b.band.min_wavelength}, {"max_wavelength", b.band.max_wavelength}}},
          {"denoiser",
           {{"width", d.width}, {"heads", d.heads}, {"blocks", d.blocks}, {"queries", d.queries}, {"mlp_hidden", d.mlp_hidden},
            {"latent_dim", d.latent_dim}, {"latent_height", d.latent_height}, {"latent_width", d.latent_width},
            {"latent_patch", d.latent_patch}, {"diffusion_steps", d.diffusion_steps}, {"beta_start", d.beta_start},
            {"beta_end", d.beta_end}, {"zero_init_condition_out", d.zero_init_condition_out}}},
          {"shared_denoiser", c.shared_denoiser},
          {"ground_temperature", c.ground_temperature},
          {"init_seed", c.init_seed}};
}

// Missing keys keep their defaults.
inline ModelConfig model_config_from_json(const nlohmann::json& j, ModelConfig c = {}) {
  auto get = [](const nlohmann::json& o, const char* k, auto& v) {
    if (o.contains(k)) v = o.at(k).get<std::decay_t<decltype(v)>>();
  };
  if (j.contains("backbone")) {
    const auto& b = j.at("backbone");
    get(b, "image_size", c.backbone.image_size);
    get(b, "patch", c.backbone.patch);
    get(b, "views", c.backbone.views);
    get(b, "dim", c.backbone.dim);
    get(b, "layers", c.backbone.layers);
    get(b, "heads", c.backbone.heads);
    get(b, "mlp_hidden", c.backbone.mlp_hidden);
    get(b, "vocab", c.backbone.vocab);
    get(b, "max_text", c.backbone.max_text);
    get(b, "min_wavelength", c.backbone.band.min_wavelength);
    get(b, "max_wavelength", c.backbone.band.max_wavelength);
  }
  if (j.contains("denoiser")) {
    const auto& d = j.at("denoiser");
    get(d, "width", c.denoiser.width);
    get(d, "heads", c.denoiser.heads);
    get(d, "blocks", c.denoiser.blocks);
    get(d, "queries", c.denoiser.queries);
    get(d, "mlp_hidden", c.denoiser.mlp_hidden);
    get(d, "latent_dim", c.denoiser.latent_dim);
    get(d, "latent_height", c.denoiser.latent_height);
    get(d, "latent_width", c.denoiser.latent_width);
    get(d, "latent_patch", c.denoiser.latent_patch);
    get(d, "diffusion_steps", c.denoiser.diffusion_steps);
    get(d, "beta_start", c.denoiser.beta_start);
    get(d, "beta_end", c.denoiser.beta_end);
    get(d, "zero_init_condition_out", c.denoiser.zero_init_condition_out);
  }
  get(j, "shared_denoiser", c.shared_denoiser);
  get(j, "ground_temperature", c.ground_temperature);
  get(j, "init_seed", c.init_seed);
  return c.sync();
}

template <class T>
class Model {
 public:
  explicit Model(ModelConfig cfg) : cfg_(cfg.sync()) {
    Rng rng(cfg_.init_seed);
    backbone_ = Backbone<T>(params_, cfg_.backbone, rng);
    view_denoiser_ = Denoiser<T>(params_, "den", cfg_.denoiser, rng);
    if (!cfg_.shared_denoiser) bev_denoiser_ = Denoiser<T>(params_, "den_bev", cfg_.denoiser, rng);
    head_ = GroundingHead<T>(params_, cfg_.ground_temperature);
  }

  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  const ModelConfig& config() const { return cfg_; }
  ParamSet<T>& params() { return params_; }
  const ParamSet<T>& params() const { return params_; }
  const Backbone<T>& backbone() const { return backbone_; }
  const Denoiser<T>& denoiser(LatentSource s) const {
    return s == LatentSource::bev && !cfg_.shared_denoiser ? bev_denoiser_ : view_denoiser_;
  }
  const GroundingHead<T>& grounding() const { return head_; }

  std::uint64_t save(const std::string& path, nlohmann::json extra = {}) const {
    nlohmann::json meta = {{"model", to_json(cfg_)}, {"extra", std::move(extra)}};
    Checkpoint ck = make_checkpoint("model-v1", meta, params_);
    return save_checkpoint(path, ck);
  }

  static std::unique_ptr<Model> load(const std::string& path, nlohmann::json* extra = nullptr) {
    const Checkpoint ck = load_checkpoint(path);
    if (ck.tag != "model-v1") throw std::runtime_error("checkpoint " + path + " is not a model (tag " + ck.tag + ")");
    auto m = std::make_unique<Model>(model_config_from_json(ck.meta.at("model")));
    load_params(ck, m->params_);
    if (extra) *extra = ck.meta.value("extra", nlohmann::json::object());
    return m;
  }

 private:
  ModelConfig cfg_;
  ParamSet<T> params_;
  Backbone<T> backbone_;
  Denoiser<T> view_denoiser_, bev_denoiser_;
  GroundingHead<T> head_;
};

}  // namespace recon3d
