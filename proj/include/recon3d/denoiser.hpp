#pragma once

// Diffusion supervision of visual outputs: DDPM forward process, query-based
// condition extraction from the LM's visual hidden states, a small DiT-style
// noise predictor, and the vanilla / cross-view / global-view losses built
// on top of it.

#include "recon3d/nn.hpp"
#include "recon3d/teacher.hpp"
#include "recon3d/view_mask.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace recon3d {

class NoiseSchedule {
 public:
  // Linear betas over steps 1..T; alpha_bar(0) = 1.
  explicit NoiseSchedule(int steps = 1000, double beta_start = 1e-4, double beta_end = 2e-2) : steps_(steps) {
    if (steps < 1) throw std::invalid_argument("noise schedule: need at least one step");
    if (!(beta_start > 0) || !(beta_end < 1) || beta_end < beta_start) throw std::invalid_argument("noise schedule: bad beta range");
    betas_.assign(static_cast<std::size_t>(steps) + 1, 0.0);
    alpha_bars_.assign(static_cast<std::size_t>(steps) + 1, 1.0);
    for (int t = 1; t <= steps; ++t) {
      const double r = steps == 1 ? 0.0 : static_cast<double>(t - 1) / (steps - 1);
      betas_[static_cast<std::size_t>(t)] = beta_start + r * (beta_end - beta_start);
      alpha_bars_[static_cast<std::size_t>(t)] = alpha_bars_[static_cast<std::size_t>(t) - 1] * (1.0 - betas_[static_cast<std::size_t>(t)]);
    }
  }

  int steps() const { return steps_; }
  double beta(int t) const { return betas_.at(static_cast<std::size_t>(check(t))); }
  double alpha_bar(int t) const { return alpha_bars_.at(static_cast<std::size_t>(check(t))); }
  double snr(int t) const { return std::sqrt(alpha_bar(t) / (1.0 - alpha_bar(t))); }

  int check(int t) const {
    if (t < 0 || t > steps_) throw std::out_of_range("timestep " + std::to_string(t) + " outside [0, " + std::to_string(steps_) + "]");
    return t;
  }

 private:
  int steps_;
  std::vector<double> betas_;
  std::vector<double> alpha_bars_;
};

template <class T>
struct NoisySample {
  Mat<T> z_t;
  int t = 0;
  Mat<T> eps;
};

// z_t = sqrt(alpha_bar_t) z0 + sqrt(1 - alpha_bar_t) eps
template <class T>
NoisySample<T> forward_diffuse(const NoiseSchedule& schedule, const Mat<T>& z0, int t, const Mat<T>& eps) {
  const double ab = schedule.alpha_bar(t);
  if (z0.rows() != eps.rows() || z0.cols() != eps.cols()) throw std::invalid_argument("forward_diffuse: eps shape mismatch");
  NoisySample<T> s;
  s.t = t;
  s.eps = eps;
  s.z_t = static_cast<T>(std::sqrt(ab)) * z0 + static_cast<T>(std::sqrt(1.0 - ab)) * eps;
  return s;
}

// A (t, eps) pair: t uniform in [1, T], eps standard normal.
template <class T>
struct DiffusionDraw {
  int t = 1;
  Mat<T> eps;
};

template <class T>
DiffusionDraw<T> sample_draw(const NoiseSchedule& schedule, Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  DiffusionDraw<T> d;
  d.t = std::uniform_int_distribution<int>(1, schedule.steps())(rng);
  d.eps = randn<T>(rows, cols, 1.0, rng);
  return d;
}

struct DenoiserConfig {
  int cond_dim = 96;  // width of the LM hidden states it reads
  int width = 96;
  int heads = 4;
  int blocks = 3;
  int queries = 16;
  int mlp_hidden = 192;
  int latent_dim = 8;
  int latent_height = 8;
  int latent_width = 8;
  int latent_patch = 2;
  int diffusion_steps = 1000;
  double beta_start = 1e-4;
  double beta_end = 2e-2;
  bool zero_init_condition_out = false;

  int tokens() const { return (latent_height / latent_patch) * (latent_width / latent_patch); }
  void validate() const {
    if (latent_height % latent_patch != 0 || latent_width % latent_patch != 0) {
      throw std::invalid_argument("denoiser: latent grid not divisible by latent patch");
    }
    if (width % heads != 0) throw std::invalid_argument("denoiser: width not divisible by heads");
  }
};

// Condition tokens for one pass: the t-independent query read-out of the
// visual outputs plus the timestep/source embedding.
template <class T>
struct ConditionTokens {
  Var<T> c;  // Q x width
  Var<T> t_embed;  // 1 x width, timestep + source embedding
};

template <class T>
class Denoiser {
 public:
  Denoiser() = default;
  Denoiser(ParamSet<T>& ps, const std::string& name, const DenoiserConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    const int w = cfg.width;
    const int pdim = cfg.latent_patch * cfg.latent_patch * cfg.latent_dim;
    queries_ = &ps.normal(name + ".queries", cfg.queries, w, 0.5, rng);
    cond_ln_ = LayerNorm<T>(ps, name + ".cond_ln", cfg.cond_dim);
    cond_attn_ = Attention<T>(ps, name + ".cond_attn", w, cfg.cond_dim, w, cfg.heads, rng);
    if (cfg.zero_init_condition_out) cond_attn_.o.weight->value.setZero();
    t_fc1_ = Linear<T>(ps, name + ".t_fc1", w, w, rng);
    t_fc2_ = Linear<T>(ps, name + ".t_fc2", w, w, rng);
    source_emb_ = &ps.normal(name + ".source_emb", 2, w, 0.1, rng);
    in_proj_ = Linear<T>(ps, name + ".in_proj", pdim, w, rng);
    pos_emb_ = &ps.normal(name + ".pos_emb", cfg.tokens(), w, 0.1, rng);
    for (int b = 0; b < cfg.blocks; ++b) {
      const std::string n = name + ".block" + std::to_string(b);
      Block blk;
      blk.mod = Linear<T>(ps, n + ".mod", w, 6 * w, rng, 0.1);
      // Gates start open.
      blk.mod.bias->value.middleCols(2 * w, w).setOnes();
      blk.mod.bias->value.middleCols(5 * w, w).setOnes();
      blk.self_attn = Attention<T>(ps, n + ".self_attn", w, w, w, cfg.heads, rng);
      blk.cross_ln = LayerNorm<T>(ps, n + ".cross_ln", w);
      blk.cross_attn = Attention<T>(ps, n + ".cross_attn", w, w, w, cfg.heads, rng);
      blk.mlp = Mlp<T>(ps, n + ".mlp", w, cfg.mlp_hidden, rng);
      blocks_.push_back(blk);
    }
    final_mod_ = Linear<T>(ps, name + ".final_mod", w, 2 * w, rng, 0.1);
    out_proj_ = Linear<T>(ps, name + ".out_proj", w, pdim, rng);
    build_patch_maps();
  }

  const DenoiserConfig& config() const { return cfg_; }
  const NoiseSchedule& schedule() const { return *schedule_; }

  // Query cross-attention over the visual outputs; independent of t, so it
  // is computed once per forward pass and shared by every denoising pass.
  Var<T> condition_base(Tape<T>& tape, Var<T> x_visual) const {
    if (x_visual.rows() == 0) throw std::invalid_argument("make_condition: empty visual outputs");
    Var<T> q = tape.param(*queries_);
    return add(q, cond_attn_(tape, q, cond_ln_(tape, x_visual), false));
  }

  Var<T> timestep_embed(Tape<T>& tape, int t, LatentSource source) const {
    Var<T> e = tape.constant(timestep_embedding<T>(t, cfg_.width));
    e = t_fc2_(tape, silu(t_fc1_(tape, e)));
    Var<T> s = gather_rows(tape.param(*source_emb_), {static_cast<int>(source)});
    return add(e, s);
  }

  ConditionTokens<T> make_condition(Tape<T>& tape, Var<T> base, int t, LatentSource source) const {
    schedule_->check(t);
    ConditionTokens<T> c;
    c.t_embed = timestep_embed(tape, t, source);
    c.c = add(base, broadcast_rows(c.t_embed, base.rows()));
    return c;
  }

  // Predicted noise with the shape of z_t ((h*w) x latent_dim).
  Var<T> predict_noise(Tape<T>& tape, const Mat<T>& z_t, const ConditionTokens<T>& cond) const {
    if (z_t.rows() != static_cast<Eigen::Index>(cfg_.latent_height) * cfg_.latent_width || z_t.cols() != cfg_.latent_dim) {
      throw std::invalid_argument("predict_noise: latent shape mismatch");
    }
    const Eigen::Index w = cfg_.width;
    const Eigen::Index pdim = static_cast<Eigen::Index>(cfg_.latent_patch) * cfg_.latent_patch * cfg_.latent_dim;
    Var<T> x = gather(tape.constant(z_t), cfg_.tokens(), pdim, patchify_);
    Var<T> h = add(in_proj_(tape, x), tape.param(*pos_emb_));
    Var<T> s = silu(cond.t_embed);
    for (const auto& b : blocks_) {
      Var<T> m = b.mod(tape, s);
      Var<T> shift1 = slice_cols(m, 0, w), scale1 = slice_cols(m, w, w), gate1 = slice_cols(m, 2 * w, w);
      Var<T> shift2 = slice_cols(m, 3 * w, w), scale2 = slice_cols(m, 4 * w, w), gate2 = slice_cols(m, 5 * w, w);
      Var<T> h1 = add_row(mul_row(layernorm_rows(h), add_scalar(scale1, T(1))), shift1);
      h = add(h, mul_row(b.self_attn(tape, h1, h1, false), gate1));
      h = add(h, b.cross_attn(tape, b.cross_ln(tape, h), cond.c, false));
      Var<T> h2 = add_row(mul_row(layernorm_rows(h), add_scalar(scale2, T(1))), shift2);
      h = add(h, mul_row(b.mlp(tape, h2), gate2));
    }
    Var<T> fm = final_mod_(tape, s);
    Var<T> hf = add_row(mul_row(layernorm_rows(h), add_scalar(slice_cols(fm, w, w), T(1))), slice_cols(fm, 0, w));
    Var<T> out = out_proj_(tape, hf);
    return gather(out, z_t.rows(), z_t.cols(), unpatchify_);
  }

 private:
  struct Block {
    Linear<T> mod;
    Attention<T> self_attn;
    LayerNorm<T> cross_ln;
    Attention<T> cross_attn;
    Mlp<T> mlp;
  };

  void build_patch_maps() {
    const int p = cfg_.latent_patch, d = cfg_.latent_dim;
    const int gw = cfg_.latent_width / p;
    const int pdim = p * p * d;
    auto fwd = std::make_shared<std::vector<int>>(static_cast<std::size_t>(cfg_.tokens()) * pdim);
    auto inv = std::make_shared<std::vector<int>>(static_cast<std::size_t>(cfg_.latent_height) * cfg_.latent_width * d);
    for (int y = 0; y < cfg_.latent_height; ++y) {
      for (int x = 0; x < cfg_.latent_width; ++x) {
        const int token = (y / p) * gw + x / p;
        const int slot = (y % p) * p + x % p;
        for (int c = 0; c < d; ++c) {
          const int src = (y * cfg_.latent_width + x) * d + c;
          const int dst = token * pdim + slot * d + c;
          (*fwd)[static_cast<std::size_t>(dst)] = src;
          (*inv)[static_cast<std::size_t>(src)] = dst;
        }
      }
    }
    patchify_ = fwd;
    unpatchify_ = inv;
    schedule_ = std::make_shared<NoiseSchedule>(cfg_.diffusion_steps, cfg_.beta_start, cfg_.beta_end);
  }

  DenoiserConfig cfg_;
  Parameter<T>* queries_ = nullptr;
  LayerNorm<T> cond_ln_;
  Attention<T> cond_attn_;
  Linear<T> t_fc1_, t_fc2_;
  Parameter<T>* source_emb_ = nullptr;
  Linear<T> in_proj_;
  Parameter<T>* pos_emb_ = nullptr;
  std::vector<Block> blocks_;
  Linear<T> final_mod_, out_proj_;
  IndexMap patchify_, unpatchify_;
  std::shared_ptr<const NoiseSchedule> schedule_;
};

template <class T>
struct ReconLoss {
  Var<T> value;  // 1x1; zero constant when not applied
  bool applied = false;
};

// MSE between predicted and true noise over the valid latent tokens.
template <class T>
Var<T> noise_mse(Var<T> eps_hat, const Mat<T>& eps, const std::vector<std::uint8_t>& valid) {
  return masked_mse_rows(eps_hat, eps, valid);
}

// One denoising pass on target z0 with a freshly drawn (t, eps). `valid`
// restricts the average to the flagged tokens; an all-false mask gives 0 with
// applied=false.
template <class T>
ReconLoss<T> diffusion_loss(Tape<T>& tape, const Denoiser<T>& den, Var<T> cond_base, const Mat<T>& z0,
                            LatentSource source, Rng& rng, const std::vector<std::uint8_t>* valid = nullptr) {
  if (!z0.allFinite()) throw std::invalid_argument("diffusion_loss: non-finite target latents");
  std::vector<std::uint8_t> mask = valid ? *valid : std::vector<std::uint8_t>(static_cast<std::size_t>(z0.rows()), 1);
  if (static_cast<Eigen::Index>(mask.size()) != z0.rows()) throw std::invalid_argument("diffusion_loss: mask size mismatch");
  DiffusionDraw<T> draw = sample_draw<T>(den.schedule(), z0.rows(), z0.cols(), rng);
  if (std::none_of(mask.begin(), mask.end(), [](std::uint8_t m) { return m != 0; })) {
    return {tape.constant(Mat<T>::Zero(1, 1)), false};
  }
  const NoisySample<T> noisy = forward_diffuse(den.schedule(), z0, draw.t, draw.eps);
  const ConditionTokens<T> c = den.make_condition(tape, cond_base, draw.t, source);
  Var<T> eps_hat = den.predict_noise(tape, noisy.z_t, c);
  return {noise_mse(eps_hat, draw.eps, mask), true};
}

// Cross-view objective: average of per-masked-view denoising losses,
// each conditioned on all visual outputs of the masked forward pass.
template <class T>
ReconLoss<T> cross_view_loss(Tape<T>& tape, const Denoiser<T>& den, Var<T> cond_base, const ViewMask& mask,
                             const std::vector<Mat<T>>& view_latents, Rng& rng) {
  if (static_cast<int>(view_latents.size()) != mask.size()) throw std::invalid_argument("cross_view_loss: latent count mismatch");
  const std::vector<int> masked = mask.masked_views();
  if (masked.empty()) return {tape.constant(Mat<T>::Zero(1, 1)), false};
  std::vector<Var<T>> terms;
  for (int j : masked) terms.push_back(diffusion_loss(tape, den, cond_base, view_latents[static_cast<std::size_t>(j)], LatentSource::view, rng).value);
  Var<T> total = terms.front();
  for (std::size_t k = 1; k < terms.size(); ++k) total = add(total, terms[k]);
  return {scale(total, T(1) / static_cast<T>(masked.size())), true};
}

template <class T>
ReconLoss<T> global_view_loss(Tape<T>& tape, const Denoiser<T>& den, Var<T> cond_base, const Mat<T>& bev_latent,
                              const std::vector<std::uint8_t>& valid_tokens, Rng& rng) {
  return diffusion_loss(tape, den, cond_base, bev_latent, LatentSource::bev, rng, &valid_tokens);
}

// Reconstruct every input view from the unmasked forward pass.
template <class T>
ReconLoss<T> vanilla_loss(Tape<T>& tape, const Denoiser<T>& den, Var<T> cond_base, const std::vector<Mat<T>>& view_latents,
                          Rng& rng) {
  if (view_latents.empty()) return {tape.constant(Mat<T>::Zero(1, 1)), false};
  Var<T> total;
  for (const auto& z : view_latents) {
    Var<T> l = diffusion_loss(tape, den, cond_base, z, LatentSource::view, rng).value;
    total = total ? add(total, l) : l;
  }
  return {scale(total, T(1) / static_cast<T>(view_latents.size())), true};
}

}  // namespace recon3d
