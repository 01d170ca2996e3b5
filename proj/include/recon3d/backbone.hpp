#pragma once

// Toy multimodal causal transformer: patch encoder, projector, learnable
// view-mask token, 3D position-aware visual tokens and a decoder-only LM that
// reads them as a prefix.

#include "recon3d/geometry.hpp"
#include "recon3d/nn.hpp"
#include "recon3d/view_mask.hpp"

#include <algorithm>
#include <limits>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace recon3d {

struct BackboneConfig {
  int image_size = 64;
  int patch = 8;
  int views = 8;
  int dim = 96;  // multiple of 6 for the position encoding
  int layers = 4;
  int heads = 4;
  int mlp_hidden = 192;
  int vocab = 64;
  int max_text = 32;
  SinusoidBand band{};

  int patches_per_view() const { return (image_size / patch) * (image_size / patch); }
  int visual_tokens() const { return views * patches_per_view(); }
  int context() const { return visual_tokens() + max_text; }

  void validate() const {
    if (image_size % patch != 0) throw std::invalid_argument("backbone: image size not divisible by patch size");
    if (dim % 6 != 0) throw std::invalid_argument("backbone: dim must be a multiple of 6");
    if (dim % heads != 0) throw std::invalid_argument("backbone: dim not divisible by heads");
  }
};

// Geometry-derived side information for one token.
struct TokenPoints {
  std::vector<Eigen::Vector3f> points;  // valid world points of the patch
  Vec3 mean = Vec3::Zero();
  bool has_points() const { return !points.empty(); }
};

// One scene's frames cut into patches, with per-patch 3D encodings. Pure
// function of the frames; built once per scene and reused every step.
struct VideoInput {
  int views = 0;
  int patches_per_view = 0;
  std::vector<Mat<float>> patch_pixels;  // per view: P x (patch*patch*3), centered at 0
  std::vector<Eigen::MatrixXd> posenc;   // per view: P x dim (zero rows for patches without points)
  std::vector<TokenPoints> tokens;       // N entries in view-major order
};

inline VideoInput build_video_input(std::span<const PosedFrame> frames, int patch, int dim, SinusoidBand band = {}) {
  if (frames.empty()) throw std::invalid_argument("build_video_input: no frames");
  VideoInput v;
  v.views = static_cast<int>(frames.size());
  const int h = frames.front().height(), w = frames.front().width();
  if (h % patch != 0 || w % patch != 0) throw std::invalid_argument("build_video_input: frame not divisible by patch");
  const int gh = h / patch, gw = w / patch;
  v.patches_per_view = gh * gw;
  for (const auto& f : frames) {
    if (f.height() != h || f.width() != w) throw std::invalid_argument("build_video_input: frames differ in size");
    const PointMap pm = unproject_frame(f);
    Mat<float> px(v.patches_per_view, patch * patch * 3);
    std::vector<Vec3> means(static_cast<std::size_t>(v.patches_per_view), Vec3::Zero());
    std::vector<bool> has(static_cast<std::size_t>(v.patches_per_view), false);
    for (int py = 0; py < gh; ++py) {
      for (int pxi = 0; pxi < gw; ++pxi) {
        const int p = py * gw + pxi;
        TokenPoints tp;
        Vec3 acc = Vec3::Zero();
        for (int dy = 0; dy < patch; ++dy) {
          for (int dx = 0; dx < patch; ++dx) {
            const int i = py * patch + dy, j = pxi * patch + dx;
            const std::size_t idx = static_cast<std::size_t>(i) * w + j;
            for (int c = 0; c < 3; ++c) px(p, (dy * patch + dx) * 3 + c) = f.rgb[idx * 3 + c] - 0.5f;
            if (pm.valid[idx]) {
              tp.points.push_back(pm.coords[idx].cast<float>());
              acc += pm.coords[idx];
            }
          }
        }
        if (tp.has_points()) {
          tp.mean = acc / static_cast<double>(tp.points.size());
          means[static_cast<std::size_t>(p)] = tp.mean;
          has[static_cast<std::size_t>(p)] = true;
        }
        v.tokens.push_back(std::move(tp));
      }
    }
    Eigen::MatrixXd pe = sinusoidal_encode(means, dim, band);
    for (int p = 0; p < v.patches_per_view; ++p) {
      if (!has[static_cast<std::size_t>(p)]) pe.row(p).setZero();
    }
    v.patch_pixels.push_back(std::move(px));
    v.posenc.push_back(std::move(pe));
  }
  return v;
}

template <class T>
struct VisualTokens {
  Var<T> tokens;                         // N x D
  std::vector<int> view_index;           // token -> view
  const std::vector<TokenPoints>* points = nullptr;
};

// Text that follows the visual prefix. Several segments can share one
// forward pass: each attends to the prefix and to itself only, with the same
// position ids it would have standing alone.
struct TextSegment {
  std::vector<int> ids;
  std::vector<int> targets;  // next-token targets, -1 = unsupervised
};

template <class T>
struct LmOutput {
  Var<T> hidden;         // (N + total text) x D, final-norm hidden states
  Var<T> visual_hidden;  // N x D
  Var<T> text_logits;    // total text x V (invalid when there is no text)
  std::vector<int> segment_offsets;  // row of each segment's first token within the text rows
  int visual_count = 0;
};

template <class T>
struct TextLoss {
  Var<T> value;  // 1x1; a zero constant when nothing is supervised
  bool applied = false;
};

template <class T>
class Backbone {
 public:
  Backbone() = default;
  Backbone(ParamSet<T>& ps, const BackboneConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    const int pdim = cfg.patch * cfg.patch * 3;
    patch_embed_ = Linear<T>(ps, "vis.patch_embed", pdim, cfg.dim, rng);
    proj1_ = Linear<T>(ps, "vis.proj1", cfg.dim, cfg.dim, rng);
    proj2_ = Linear<T>(ps, "vis.proj2", cfg.dim, cfg.dim, rng);
    mask_token_ = &ps.normal("vis.mask_token", 1, cfg.dim, 0.02, rng);
    tok_emb_ = &ps.normal("lm.tok_emb", cfg.vocab, cfg.dim, 0.1, rng);
    pos_emb_ = &ps.normal("lm.pos_emb", cfg.context(), cfg.dim, 0.02, rng);
    for (int l = 0; l < cfg.layers; ++l) {
      const std::string n = "lm.block" + std::to_string(l);
      Block b;
      b.ln1 = LayerNorm<T>(ps, n + ".ln1", cfg.dim);
      b.attn = Attention<T>(ps, n + ".attn", cfg.dim, cfg.dim, cfg.dim, cfg.heads, rng, 1.0 / std::sqrt(2.0 * cfg.layers));
      b.ln2 = LayerNorm<T>(ps, n + ".ln2", cfg.dim);
      b.mlp = Mlp<T>(ps, n + ".mlp", cfg.dim, cfg.mlp_hidden, rng);
      blocks_.push_back(b);
    }
    ln_f_ = LayerNorm<T>(ps, "lm.ln_f", cfg.dim);
    head_ = Linear<T>(ps, "lm.head", cfg.dim, cfg.vocab, rng, 1.0, false);
  }

  const BackboneConfig& config() const { return cfg_; }
  Parameter<T>& mask_token() const { return *mask_token_; }
  Parameter<T>& lm_head() const { return *head_.weight; }

  // Projected patch features plus 3D position encoding for visible views;
  // every token of a masked view is the shared mask token, without position
  // information.
  VisualTokens<T> embed_video(Tape<T>& tape, const VideoInput& video, const ViewMask& mask) const {
    if (mask.size() != video.views) {
      throw std::invalid_argument("embed_video: mask has " + std::to_string(mask.size()) + " entries for " +
                                  std::to_string(video.views) + " views");
    }
    VisualTokens<T> out;
    out.points = &video.tokens;
    std::vector<Var<T>> parts;
    const Eigen::Index p = video.patches_per_view;
    for (int j = 0; j < video.views; ++j) {
      if (!mask.visible(j)) {
        parts.push_back(broadcast_rows(tape.param(*mask_token_), p));
      } else {
        Var<T> x = tape.constant(video.patch_pixels[static_cast<std::size_t>(j)].template cast<T>());
        Var<T> f = proj2_(tape, gelu(proj1_(tape, patch_embed_(tape, x))));
        parts.push_back(add(f, tape.constant(video.posenc[static_cast<std::size_t>(j)].template cast<T>())));
      }
      for (Eigen::Index k = 0; k < p; ++k) out.view_index.push_back(j);
    }
    out.tokens = concat_rows(parts);
    return out;
  }

  LmOutput<T> forward(Tape<T>& tape, Var<T> visual, const std::vector<TextSegment>& segments) const {
    const int n = static_cast<int>(visual.rows());
    if (visual.cols() != cfg_.dim) throw std::invalid_argument("forward: visual width mismatch");
    std::vector<int> ids, pos;
    std::vector<int> seg_start_col, seg_end_col;
    LmOutput<T> out;
    out.visual_count = n;
    for (int k = 0; k < n; ++k) pos.push_back(k);
    int total = 0;
    for (const auto& s : segments) {
      if (s.ids.size() != s.targets.size()) throw std::invalid_argument("forward: segment targets size mismatch");
      if (n + static_cast<int>(s.ids.size()) > cfg_.context()) {
        throw std::invalid_argument("forward: sequence of length " + std::to_string(n + s.ids.size()) +
                                    " exceeds context " + std::to_string(cfg_.context()));
      }
      out.segment_offsets.push_back(total);
      for (std::size_t k = 0; k < s.ids.size(); ++k) {
        ids.push_back(s.ids[k]);
        pos.push_back(n + static_cast<int>(k));
      }
      total += static_cast<int>(s.ids.size());
    }

    // Attention limits per row: columns [0, prefix_end) and [seg_begin, seg_end).
    auto limits = std::make_shared<AttentionLimits>();
    for (int r = 0; r < n; ++r) limits->push_back({r + 1, 0, 0});
    {
      int col = n;
      for (const auto& s : segments) {
        const int len = static_cast<int>(s.ids.size());
        for (int k = 0; k < len; ++k) limits->push_back({n, col, col + k + 1});
        col += len;
      }
    }

    Var<T> x = visual;
    if (total > 0) x = concat_rows(std::vector<Var<T>>{visual, gather_rows(tape.param(*tok_emb_), ids)});
    x = add(x, gather_rows(tape.param(*pos_emb_), pos));
    for (const auto& b : blocks_) {
      Var<T> h = b.ln1(tape, x);
      x = add(x, masked_attention(tape, b.attn, h, limits));
      x = add(x, b.mlp(tape, b.ln2(tape, x)));
    }
    out.hidden = ln_f_(tape, x);
    out.visual_hidden = n == static_cast<int>(out.hidden.rows()) ? out.hidden : slice_rows(out.hidden, 0, n);
    if (total > 0) out.text_logits = head_(tape, slice_rows(out.hidden, n, total));
    return out;
  }

 private:
  struct Limit {
    int prefix_end, seg_begin, seg_end;
  };
  using AttentionLimits = std::vector<Limit>;

  struct Block {
    LayerNorm<T> ln1, ln2;
    Attention<T> attn;
    Mlp<T> mlp;
  };

  static Var<T> masked_attention(Tape<T>& tape, const Attention<T>& a, Var<T> x, std::shared_ptr<const AttentionLimits> limits) {
    Var<T> qq = a.q(tape, x), kk = a.k(tape, x), vv = a.v(tape, x);
    const Eigen::Index dh = a.dim / a.heads;
    const T s = T(1) / std::sqrt(static_cast<T>(dh));
    std::vector<Var<T>> outs;
    for (int h = 0; h < a.heads; ++h) {
      Var<T> qh = a.heads == 1 ? qq : slice_cols(qq, h * dh, dh);
      Var<T> kh = a.heads == 1 ? kk : slice_cols(kk, h * dh, dh);
      Var<T> vh = a.heads == 1 ? vv : slice_cols(vv, h * dh, dh);
      Var<T> p = limited_softmax(scale(matmul_nt(qh, kh), s), limits);
      outs.push_back(matmul(p, vh));
    }
    return a.o(tape, a.heads == 1 ? outs.front() : concat_cols(outs));
  }

  static Var<T> limited_softmax(Var<T> a, std::shared_ptr<const AttentionLimits> limits) {
    const Mat<T>& x = a.value();
    Mat<T> y = Mat<T>::Zero(x.rows(), x.cols());
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
      const Limit& l = (*limits)[static_cast<std::size_t>(r)];
      T mx = -std::numeric_limits<T>::infinity();
      for (int c = 0; c < l.prefix_end; ++c) mx = std::max(mx, x(r, c));
      for (int c = l.seg_begin; c < l.seg_end; ++c) mx = std::max(mx, x(r, c));
      T sum = 0;
      for (int c = 0; c < l.prefix_end; ++c) sum += (y(r, c) = std::exp(x(r, c) - mx));
      for (int c = l.seg_begin; c < l.seg_end; ++c) sum += (y(r, c) = std::exp(x(r, c) - mx));
      y.row(r) /= sum;
    }
    Mat<T> p = y;
    return a.tape->push(std::move(y), a.tape->needs_grad(a), [a, p](Tape<T>& tp, const Mat<T>& g) {
      Eigen::Matrix<T, Eigen::Dynamic, 1> dot = g.cwiseProduct(p).rowwise().sum();
      Mat<T> ga = p.array() * (g.colwise() - dot).array();
      tp.accumulate(a, ga);
    });
  }

  BackboneConfig cfg_;
  Linear<T> patch_embed_, proj1_, proj2_;
  Parameter<T>* mask_token_ = nullptr;
  Parameter<T>* tok_emb_ = nullptr;
  Parameter<T>* pos_emb_ = nullptr;
  std::vector<Block> blocks_;
  LayerNorm<T> ln_f_;
  Linear<T> head_;
};

// Mean next-token cross-entropy over the supervised positions of one
// segment; zero with applied=false when nothing is supervised.
template <class T>
TextLoss<T> text_loss(Tape<T>& tape, Var<T> logits, const std::vector<int>& targets) {
  const bool any = std::any_of(targets.begin(), targets.end(), [](int t) { return t >= 0; });
  if (!any || !logits) return {tape.constant(Mat<T>::Zero(1, 1)), false};
  return {cross_entropy(logits, targets), true};
}

}  // namespace recon3d
