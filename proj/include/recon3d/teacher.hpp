#pragma once

// Latent tokenizer producing reconstruction targets: a small convolutional
// KL-regularized autoencoder with stride 8. After training it is frozen and
// encode() returns the (channel-standardized) posterior mean.

#include "recon3d/checkpoint.hpp"
#include "recon3d/conv.hpp"
#include "recon3d/optim.hpp"

#include <cmath>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace recon3d {

enum class LatentSource { view = 0, bev = 1 };

struct LatentGrid {
  int height = 0, width = 0, channels = 0;
  int stride = 8;
  LatentSource source = LatentSource::view;
  Mat<float> tokens;  // (height*width) x channels
};

struct TeacherConfig {
  int c1 = 16;
  int c2 = 32;
  int latent_dim = 8;
  double kl_weight = 1e-4;
  int steps = 1500;
  int batch = 8;
  double lr = 2e-3;
  double mse_threshold = 0.01;
  double dim_fraction = 0.15;  // share of training samples darkened by a random factor
  std::uint64_t seed = 7;
};

struct TeacherReport {
  double train_mse = 0;
  double heldout_mse = 0;
  std::vector<double> latent_variance;  // per channel, over held-out latents
  std::uint64_t checksum = 0;
  std::vector<double> loss_curve;
};

class TrainingError : public std::runtime_error {
 public:
  TrainingError(const std::string& what, double value) : std::runtime_error(what), value_(value) {}
  double value() const { return value_; }

 private:
  double value_;
};

class Teacher {
 public:
  static constexpr int kStride = 8;

  explicit Teacher(TeacherConfig cfg = {}) : cfg_(cfg) {
    Rng rng(cfg_.seed);
    enc1_ = Conv2d<float>(params_, "enc1", 3, cfg_.c1, 3, 2, rng);
    enc2_ = Conv2d<float>(params_, "enc2", cfg_.c1, cfg_.c2, 3, 2, rng);
    enc3_ = Conv2d<float>(params_, "enc3", cfg_.c2, cfg_.c2, 3, 2, rng);
    enc4_ = Conv2d<float>(params_, "enc4", cfg_.c2, 2 * cfg_.latent_dim, 1, 1, rng);
    dec1_ = Conv2d<float>(params_, "dec1", cfg_.latent_dim, cfg_.c2, 3, 1, rng);
    dec2_ = Conv2d<float>(params_, "dec2", cfg_.c2, cfg_.c2, 3, 1, rng);
    dec3_ = Conv2d<float>(params_, "dec3", cfg_.c2, cfg_.c1, 3, 1, rng);
    dec4_ = Conv2d<float>(params_, "dec4", cfg_.c1, 3, 3, 1, rng);
    shift_ = &params_.zeros("latent.shift", 1, cfg_.latent_dim);
    scale_ = &params_.constant("latent.scale", 1, cfg_.latent_dim, 1.0f);
    shift_->trainable = false;
    scale_->trainable = false;
  }

  Teacher(const Teacher&) = delete;
  Teacher& operator=(const Teacher&) = delete;
  Teacher(Teacher&&) = default;
  Teacher& operator=(Teacher&&) = default;

  const TeacherConfig& config() const { return cfg_; }
  int latent_dim() const { return cfg_.latent_dim; }
  bool frozen() const { return frozen_; }
  std::uint64_t checksum() const { return checksum_; }
  ParamSet<float>& params() { return params_; }

  LatentGrid encode(std::span<const float> rgb, int height, int width, LatentSource source = LatentSource::view) const {
    check_size(height, width, rgb.size());
    Tape<float> tape(false);
    auto [mu, logvar] = encoder(tape, image_var(tape, rgb, height, width), {height, width, 3});
    LatentGrid g;
    g.height = height / kStride;
    g.width = width / kStride;
    g.channels = cfg_.latent_dim;
    g.source = source;
    g.tokens = (mu.value().rowwise() - shift_->value.row(0)).array().rowwise() / scale_->value.row(0).array();
    return g;
  }

  std::vector<float> decode(const LatentGrid& z) const {
    if (z.channels != cfg_.latent_dim || z.tokens.rows() != static_cast<Eigen::Index>(z.height) * z.width) {
      throw std::invalid_argument("teacher decode: latent shape mismatch");
    }
    Tape<float> tape(false);
    Mat<float> raw = (z.tokens.array().rowwise() * scale_->value.row(0).array()).rowwise() + shift_->value.row(0).array();
    Var<float> out = decoder(tape, tape.constant(raw), z.height, z.width);
    const Mat<float>& v = out.value();
    return std::vector<float>(v.data(), v.data() + v.size());
  }

  // Trains on `images` (each H*W*3) and freezes. Throws TrainingError when
  // held-out MSE stays above the threshold and enforce_threshold is set.
  static Teacher train(const std::vector<std::vector<float>>& images, const std::vector<std::vector<float>>& heldout,
                       int height, int width, const TeacherConfig& cfg, TeacherReport* report = nullptr,
                       bool enforce_threshold = true) {
    if (images.size() < 100) throw std::invalid_argument("train_teacher: need at least 100 training images");
    Teacher t(cfg);
    for (const auto& im : images) t.check_size(height, width, im.size());
    Rng rng(cfg.seed ^ 0x5eedULL);
    AdamWOptions opts;
    opts.weight_decay = 0.0;
    AdamW<float> opt(opts);
    std::vector<std::size_t> order(images.size());
    std::iota(order.begin(), order.end(), 0);
    std::size_t cursor = order.size();
    TeacherReport rep;
    double ema = -1;
    for (int step = 0; step < cfg.steps; ++step) {
      t.params_.zero_grad();
      double batch_mse = 0;
      for (int b = 0; b < cfg.batch; ++b) {
        if (cursor >= order.size()) {
          std::shuffle(order.begin(), order.end(), rng);
          cursor = 0;
        }
        const auto& src = images[order[cursor++]];
        std::vector<float> dimmed;
        if (cfg.dim_fraction > 0 && std::uniform_real_distribution<double>(0, 1)(rng) < cfg.dim_fraction) {
          const float f = static_cast<float>(std::uniform_real_distribution<double>(0, 1)(rng));
          dimmed.resize(src.size());
          for (std::size_t k = 0; k < src.size(); ++k) dimmed[k] = src[k] * f;
        }
        const auto& im = dimmed.empty() ? src : dimmed;
        Tape<float> tape;
        Var<float> x = image_var(tape, im, height, width);
        auto [mu, logvar] = t.encoder(tape, x, {height, width, 3});
        Mat<float> eps = randn<float>(mu.rows(), mu.cols(), 1.0, rng);
        Var<float> z = add(mu, mul(exp(scale(logvar, 0.5f)), tape.constant(eps)));
        Var<float> recon = t.decoder(tape, z, height / kStride, width / kStride);
        Var<float> mse = mean(mul(sub(recon, x), sub(recon, x)));
        // KL(q || N(0,1)) averaged over latent elements.
        Var<float> kl = scale(mean(sub(add(mul(mu, mu), exp(logvar)), add_scalar(logvar, 1.0f))), 0.5f);
        Var<float> loss = scale(add(mse, scale(kl, static_cast<float>(cfg.kl_weight))), 1.0f / static_cast<float>(cfg.batch));
        tape.backward(loss);
        batch_mse += mse.item();
      }
      batch_mse /= cfg.batch;
      ema = ema < 0 ? batch_mse : 0.95 * ema + 0.05 * batch_mse;
      rep.loss_curve.push_back(batch_mse);
      opt.step(t.params_, warmup_cosine_lr(step, cfg.steps, cfg.steps / 20, cfg.lr, 0.05));
    }
    rep.train_mse = ema;

    // Standardize latent channels over the training set, then freeze.
    Eigen::VectorXd s1 = Eigen::VectorXd::Zero(cfg.latent_dim), s2 = Eigen::VectorXd::Zero(cfg.latent_dim);
    double count = 0;
    for (const auto& im : images) {
      const LatentGrid g = t.encode(im, height, width);
      for (Eigen::Index r = 0; r < g.tokens.rows(); ++r) {
        const Eigen::VectorXd v = g.tokens.row(r).cast<double>().transpose();
        s1 += v;
        s2 += v.cwiseProduct(v);
        count += 1;
      }
    }
    const Eigen::VectorXd m = s1 / count;
    const Eigen::VectorXd var = (s2 / count - m.cwiseProduct(m)).cwiseMax(1e-8);
    for (int c = 0; c < cfg.latent_dim; ++c) {
      t.shift_->value(0, c) = static_cast<float>(m(c));
      t.scale_->value(0, c) = static_cast<float>(std::sqrt(var(c)));
    }
    t.freeze();

    rep.heldout_mse = t.reconstruction_mse(heldout.empty() ? images : heldout, height, width);
    rep.latent_variance = t.latent_variance(heldout.empty() ? images : heldout, height, width);
    rep.checksum = t.checksum_;
    if (report) *report = rep;
    if (enforce_threshold && !(rep.heldout_mse < cfg.mse_threshold)) {
      throw TrainingError("teacher did not converge: held-out MSE " + std::to_string(rep.heldout_mse) + " >= threshold " +
                              std::to_string(cfg.mse_threshold),
                          rep.heldout_mse);
    }
    return t;
  }

  double reconstruction_mse(const std::vector<std::vector<float>>& images, int height, int width) const {
    double total = 0;
    for (const auto& im : images) {
      const auto rec = decode(encode(im, height, width));
      double s = 0;
      for (std::size_t k = 0; k < im.size(); ++k) s += (rec[k] - im[k]) * (rec[k] - im[k]);
      total += s / static_cast<double>(im.size());
    }
    return total / static_cast<double>(images.size());
  }

  std::vector<double> latent_variance(const std::vector<std::vector<float>>& images, int height, int width) const {
    Eigen::VectorXd s1 = Eigen::VectorXd::Zero(cfg_.latent_dim), s2 = Eigen::VectorXd::Zero(cfg_.latent_dim);
    double n = 0;
    for (const auto& im : images) {
      const LatentGrid g = encode(im, height, width);
      for (Eigen::Index r = 0; r < g.tokens.rows(); ++r) {
        const Eigen::VectorXd v = g.tokens.row(r).cast<double>().transpose();
        s1 += v;
        s2 += v.cwiseProduct(v);
        n += 1;
      }
    }
    std::vector<double> out(static_cast<std::size_t>(cfg_.latent_dim));
    for (int c = 0; c < cfg_.latent_dim; ++c) out[static_cast<std::size_t>(c)] = s2(c) / n - (s1(c) / n) * (s1(c) / n);
    return out;
  }

  void freeze() {
    for (auto& p : params_.all()) p.trainable = false;
    frozen_ = true;
    Checkpoint ck = make_checkpoint("teacher-v1", config_json(), params_);
    checksum_ = content_checksum(ck);
  }

  std::uint64_t save(const std::string& path) const {
    Checkpoint ck = make_checkpoint("teacher-v1", config_json(), params_);
    return save_checkpoint(path, ck);
  }

  static Teacher load(const std::string& path) {
    const Checkpoint ck = load_checkpoint(path);
    if (ck.tag != "teacher-v1") throw std::runtime_error("checkpoint " + path + " is not a teacher (tag " + ck.tag + ")");
    TeacherConfig cfg;
    cfg.c1 = ck.meta.at("c1");
    cfg.c2 = ck.meta.at("c2");
    cfg.latent_dim = ck.meta.at("latent_dim");
    cfg.kl_weight = ck.meta.at("kl_weight");
    cfg.seed = ck.meta.at("seed");
    Teacher t(cfg);
    load_params(ck, t.params_);
    t.freeze();
    return t;
  }

 private:
  static std::uint64_t content_checksum(const Checkpoint& ck) {
    std::uint64_t h = fnv1a64(ck.tag.data(), ck.tag.size());
    for (const auto& [name, m] : ck.tensors) {
      h = fnv1a64(name.data(), name.size(), h);
      h = fnv1a64(m.data(), sizeof(float) * static_cast<std::size_t>(m.size()), h);
    }
    return h;
  }

  nlohmann::json config_json() const {
    return {{"c1", cfg_.c1}, {"c2", cfg_.c2}, {"latent_dim", cfg_.latent_dim}, {"kl_weight", cfg_.kl_weight}, {"seed", cfg_.seed},
            {"stride", kStride}};
  }

  void check_size(int height, int width, std::size_t n) const {
    if (height % kStride != 0 || width % kStride != 0) {
      throw std::invalid_argument("teacher: image size " + std::to_string(height) + "x" + std::to_string(width) +
                                  " not divisible by stride " + std::to_string(kStride));
    }
    if (n != static_cast<std::size_t>(height) * width * 3) throw std::invalid_argument("teacher: pixel buffer size mismatch");
  }

  static Var<float> image_var(Tape<float>& tape, std::span<const float> rgb, int height, int width) {
    Mat<float> m(static_cast<Eigen::Index>(height) * width, 3);
    std::copy(rgb.begin(), rgb.end(), m.data());
    return tape.constant(std::move(m));
  }

  std::pair<Var<float>, Var<float>> encoder(Tape<float>& tape, Var<float> x, ImageShape s) const {
    Var<float> h = silu(enc1_(tape, x, s));
    s = enc1_.output_shape(s);
    h = silu(enc2_(tape, h, s));
    s = enc2_.output_shape(s);
    h = silu(enc3_(tape, h, s));
    s = enc3_.output_shape(s);
    Var<float> stats = enc4_(tape, h, s);
    return {slice_cols(stats, 0, cfg_.latent_dim), slice_cols(stats, cfg_.latent_dim, cfg_.latent_dim)};
  }

  Var<float> decoder(Tape<float>& tape, Var<float> z, int gh, int gw) const {
    ImageShape s{gh, gw, cfg_.latent_dim};
    Var<float> h = silu(dec1_(tape, z, s));
    s = dec1_.output_shape(s);
    h = upsample2(h, s);
    s = {s.height * 2, s.width * 2, s.channels};
    h = silu(dec2_(tape, h, s));
    s = dec2_.output_shape(s);
    h = upsample2(h, s);
    s = {s.height * 2, s.width * 2, s.channels};
    h = silu(dec3_(tape, h, s));
    s = dec3_.output_shape(s);
    h = upsample2(h, s);
    s = {s.height * 2, s.width * 2, s.channels};
    return sigmoid(dec4_(tape, h, s));
  }

  TeacherConfig cfg_;
  ParamSet<float> params_;
  Conv2d<float> enc1_, enc2_, enc3_, enc4_, dec1_, dec2_, dec3_, dec4_;
  Parameter<float>* shift_ = nullptr;
  Parameter<float>* scale_ = nullptr;
  bool frozen_ = false;
  std::uint64_t checksum_ = 0;
};

}  // namespace recon3d
