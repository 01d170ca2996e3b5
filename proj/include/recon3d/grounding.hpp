#pragma once

// Object grounding: per-proposal features pooled from the visual hidden
// states, InfoNCE against the <ground> token state, and the single/multi
// target selection rules.

#include "recon3d/backbone.hpp"
#include "recon3d/scene.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>
#include <vector>

namespace recon3d {

struct ObjectProposal {
  int id = 0;
  Box3 box;
  Vec3 center() const { return box.center(); }
};

// Ids of jittered distractors start here; object ids stay below it.
inline constexpr int kDistractorIdBase = 1000;

// Ground-truth boxes plus one distractor per object, shifted along x or y by
// 65-100% of the box extent so that its IoU with the source box stays below
// 0.25. Distractors are kept inside the room footprint.
inline std::vector<ObjectProposal> make_proposals(const SceneSpec& scene, std::uint64_t seed) {
  std::mt19937_64 rng(seed ^ 0x70a05a15ULL);
  std::uniform_real_distribution<double> frac(0.65, 1.0);
  std::vector<ObjectProposal> out;
  for (const auto& o : scene.objects) out.push_back({o.id, o.box});
  for (const auto& o : scene.objects) {
    const int axis = std::uniform_int_distribution<int>(0, 1)(rng);
    const double shift = frac(rng) * o.box.extent()[axis];
    Box3 b = o.box;
    // Prefer the direction with more room.
    const double up_room = scene.room.hi[axis] - o.box.hi[axis];
    const double down_room = o.box.lo[axis] - scene.room.lo[axis];
    const double dir = up_room >= down_room ? 1.0 : -1.0;
    b.lo[axis] += dir * shift;
    b.hi[axis] += dir * shift;
    out.push_back({kDistractorIdBase + o.id, b});
  }
  return out;
}

struct PatchSelection {
  std::vector<int> tokens;  // qualifying visual token indices
  bool fallback() const { return tokens.empty(); }
};

// Tokens where strictly more than half of the valid points fall inside the
// box (inflated by `tol` to admit points lying on its faces).
inline PatchSelection select_patches(const std::vector<TokenPoints>& points, const Box3& box, double tol = 0.02) {
  PatchSelection s;
  Box3 b = box;
  b.lo.array() -= tol;
  b.hi.array() += tol;
  for (std::size_t k = 0; k < points.size(); ++k) {
    const auto& pts = points[k].points;
    if (pts.empty()) continue;
    std::size_t inside = 0;
    for (const auto& p : pts) {
      const Vec3 q = p.cast<double>();
      if ((q.array() >= b.lo.array()).all() && (q.array() <= b.hi.array()).all()) ++inside;
    }
    if (2 * inside > pts.size()) s.tokens.push_back(static_cast<int>(k));
  }
  return s;
}

template <class T>
struct ObjectFeature {
  Var<T> feature;  // 1 x D
  bool fallback = false;
};

// Mean hidden state of the qualifying patches plus the position encoding of
// the box center; the position encoding alone when no patch qualifies.
template <class T>
ObjectFeature<T> aggregate_object_features(Tape<T>& tape, Var<T> visual_hidden, const std::vector<TokenPoints>& points,
                                           const ObjectProposal& proposal, SinusoidBand band = {}) {
  if (static_cast<Eigen::Index>(points.size()) != visual_hidden.rows()) {
    throw std::invalid_argument("aggregate_object_features: token point sets do not match visual tokens");
  }
  const int dim = static_cast<int>(visual_hidden.cols());
  const Vec3 c = proposal.center();
  Var<T> pe = tape.constant(sinusoidal_encode(std::span<const Vec3>(&c, 1), dim, band).template cast<T>());
  const PatchSelection sel = select_patches(points, proposal.box);
  if (sel.fallback()) return {pe, true};
  Var<T> pooled = scale(sum_rows(gather_rows(visual_hidden, sel.tokens)), T(1) / static_cast<T>(sel.tokens.size()));
  return {add(pooled, pe), false};
}

// Learnable temperature of the contrastive logits, stored as log(tau).
template <class T>
class GroundingHead {
 public:
  GroundingHead() = default;
  GroundingHead(ParamSet<T>& ps, double tau = 0.07) { log_tau_ = &ps.constant("ground.log_tau", 1, 1, static_cast<T>(std::log(tau))); }

  T temperature() const { return std::exp(log_tau_->value(0, 0)); }

  // 1 x P logits: cosine similarity divided by the temperature.
  Var<T> logits(Tape<T>& tape, Var<T> ground_hidden, Var<T> features) const {
    Var<T> q = l2_normalize_rows(ground_hidden);
    Var<T> k = l2_normalize_rows(features);
    Var<T> inv_tau = exp(scale(tape.param(*log_tau_), T(-1)));
    return mul_scalar(matmul_nt(q, k), inv_tau);
  }

 private:
  Parameter<T>* log_tau_ = nullptr;
};

// Mean over targets of -log softmax(logits)[target]. `targets` are column
// indices into the 1 x P logits.
template <class T>
Var<T> grounding_loss(Var<T> logits, const std::vector<int>& targets) {
  if (logits.rows() != 1) throw std::invalid_argument("grounding_loss: expected a single row of logits");
  if (logits.cols() < 2) throw std::invalid_argument("grounding_loss: need at least two proposals");
  if (targets.empty()) throw std::invalid_argument("grounding_loss: no targets");
  Var<T> total;
  for (int t : targets) {
    Var<T> l = cross_entropy(logits, std::vector<int>{t});
    total = total ? add(total, l) : l;
  }
  return scale(total, T(1) / static_cast<T>(targets.size()));
}

// Id of the highest similarity; ties go to the lowest id.
inline int select_single(const std::vector<int>& ids, const std::vector<double>& sims) {
  if (ids.empty() || ids.size() != sims.size()) throw std::invalid_argument("select_single: need matching, nonempty ids and scores");
  std::size_t best = 0;
  for (std::size_t k = 1; k < ids.size(); ++k) {
    if (sims[k] > sims[best] || (sims[k] == sims[best] && ids[k] < ids[best])) best = k;
  }
  return ids[best];
}

inline int select_single(const std::vector<double>& sims) {
  std::vector<int> ids(sims.size());
  std::iota(ids.begin(), ids.end(), 0);
  return select_single(ids, sims);
}

// Highest-probability proposals until their cumulative probability exceeds
// `threshold`. Returned ids are sorted.
inline std::vector<int> select_multi(const std::vector<int>& ids, const std::vector<double>& probs, double threshold = 0.25) {
  if (ids.empty() || ids.size() != probs.size()) throw std::invalid_argument("select_multi: need matching, nonempty ids and probabilities");
  const double total = std::accumulate(probs.begin(), probs.end(), 0.0);
  if (std::abs(total - 1.0) > 1e-6) throw std::invalid_argument("select_multi: probabilities sum to " + std::to_string(total));
  std::vector<std::size_t> order(ids.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return probs[a] != probs[b] ? probs[a] > probs[b] : ids[a] < ids[b];
  });
  std::vector<int> out;
  double cum = 0;
  for (std::size_t k : order) {
    out.push_back(ids[k]);
    cum += probs[k];
    if (cum > threshold) break;
  }
  std::sort(out.begin(), out.end());
  return out;
}

inline std::vector<int> select_multi(const std::vector<double>& probs, double threshold = 0.25) {
  std::vector<int> ids(probs.size());
  std::iota(ids.begin(), ids.end(), 0);
  return select_multi(ids, probs, threshold);
}

inline std::vector<double> softmax(const std::vector<double>& x) {
  if (x.empty()) return {};
  const double mx = *std::max_element(x.begin(), x.end());
  std::vector<double> p(x.size());
  double z = 0;
  for (std::size_t k = 0; k < x.size(); ++k) z += (p[k] = std::exp(x[k] - mx));
  for (auto& v : p) v /= z;
  return p;
}

struct GroundingSample {
  std::vector<ObjectProposal> proposals;
  std::vector<int> targets;  // proposal ids
  int ground_position = -1;  // within the text segment
};

// Proposal features and contrastive logits for one expression; `text_row` is
// the <ground> token's row in the LM's hidden states.
template <class T>
struct GroundingForward {
  Var<T> logits;  // 1 x P
  std::vector<int> ids;
  int fallbacks = 0;
};

template <class T>
GroundingForward<T> grounding_forward(Tape<T>& tape, const GroundingHead<T>& head, const LmOutput<T>& lm,
                                      const std::vector<TokenPoints>& points, const GroundingSample& sample, int text_row,
                                      SinusoidBand band = {}) {
  if (sample.proposals.size() < 2) throw std::invalid_argument("grounding: need at least two proposals");
  GroundingForward<T> g;
  std::vector<Var<T>> feats;
  for (const auto& p : sample.proposals) {
    ObjectFeature<T> f = aggregate_object_features(tape, lm.visual_hidden, points, p, band);
    g.fallbacks += f.fallback ? 1 : 0;
    feats.push_back(f.feature);
    g.ids.push_back(p.id);
  }
  Var<T> q = slice_rows(lm.hidden, lm.visual_count + text_row, 1);
  g.logits = head.logits(tape, q, concat_rows(feats));
  return g;
}

// Column indices of the sample's targets.
inline std::vector<int> target_columns(const std::vector<int>& ids, const std::vector<int>& targets) {
  std::vector<int> cols;
  for (int t : targets) {
    auto it = std::find(ids.begin(), ids.end(), t);
    if (it == ids.end()) throw std::invalid_argument("grounding: target " + std::to_string(t) + " is not a proposal");
    cols.push_back(static_cast<int>(it - ids.begin()));
  }
  return cols;
}

}  // namespace recon3d
