#pragma once

// Evaluation on synthetic tasks: QA exact match with greedy decoding,
// grounding Acc@IoU and F1@IoU, and single-step reconstruction PSNR.

#include "recon3d/trainer.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

namespace recon3d {

inline std::string normalize_answer(const std::string& s) { return Tokenizer::normalize(s); }

inline bool exact_match(const std::string& pred, const std::string& answer) { return normalize_answer(pred) == normalize_answer(answer); }

struct QaPrediction {
  std::string scene, question, answer, prediction;
  bool correct = false;
};

struct QaResult {
  double em = 0;
  int count = 0;
  std::vector<QaPrediction> predictions;
};

struct QaOptions {
  int max_answer_tokens = 4;
  // When nonempty, decoding picks the best of these token ids for the first
  // answer token and stops there (closed-vocabulary answering).
  std::vector<int> candidates;
  // Restrict to questions whose answer is one of these words (empty: all).
  std::vector<std::string> answer_filter;
};

// Greedy decoding of all of one scene's questions at once: every question is
// its own segment, so they cannot see each other.
inline std::vector<std::string> answer_questions(const Model<float>& model, const Tokenizer& tok, const PreparedScene& scene,
                                                 const std::vector<const TextItem*>& items, const QaOptions& opt) {
  const auto& bb = model.backbone();
  std::vector<TextSegment> segs;
  for (const auto* it : items) {
    std::vector<int> prompt(it->text.ids.begin(), it->text.ids.begin() + it->text.prompt_length);
    segs.push_back({prompt, std::vector<int>(prompt.size(), -1)});
  }
  std::vector<std::vector<int>> answers(items.size());
  std::vector<bool> done(items.size(), false);
  const int steps = opt.candidates.empty() ? opt.max_answer_tokens : 1;
  Tape<float> vis_tape(false);
  // The visual prefix does not depend on text; embed it once.
  const VisualTokens<float> vis = bb.embed_video(vis_tape, scene.video, ViewMask::all_visible(scene.video.views));
  for (int s = 0; s < steps; ++s) {
    Tape<float> tape(false);
    Var<float> v = tape.constant(vis.tokens.value());
    const LmOutput<float> lm = bb.forward(tape, v, segs);
    const Mat<float>& logits = lm.text_logits.value();
    bool all_done = true;
    for (std::size_t k = 0; k < items.size(); ++k) {
      if (done[k]) continue;
      const int row = lm.segment_offsets[k] + static_cast<int>(segs[k].ids.size()) - 1;
      int best = -1;
      float best_v = -std::numeric_limits<float>::infinity();
      if (opt.candidates.empty()) {
        // The model vocabulary may be larger than the tokenizer's.
        const int n = std::min<int>(static_cast<int>(logits.cols()), tok.size());
        for (int c = 0; c < n; ++c) {
          if (logits(row, c) > best_v) best_v = logits(row, c), best = c;
        }
      } else {
        for (int c : opt.candidates) {
          if (logits(row, c) > best_v) best_v = logits(row, c), best = c;
        }
      }
      if (best == Tokenizer::eos || static_cast<int>(segs[k].ids.size()) >= bb.config().max_text) {
        done[k] = true;
        continue;
      }
      answers[k].push_back(best);
      segs[k].ids.push_back(best);
      segs[k].targets.push_back(-1);
      all_done = false;
    }
    if (all_done) break;
  }
  std::vector<std::string> out;
  for (const auto& a : answers) out.push_back(tok.decode(a));
  return out;
}

inline QaResult eval_qa(const Model<float>& model, const Tokenizer& tok, const std::vector<PreparedScene>& scenes,
                        const QaOptions& opt = {}) {
  QaResult r;
  int correct = 0;
  for (const auto& sc : scenes) {
    std::vector<const TextItem*> items;
    for (const auto& it : sc.of(TaskTag::qa)) {
      if (!opt.answer_filter.empty() &&
          std::find(opt.answer_filter.begin(), opt.answer_filter.end(), it.record->answer) == opt.answer_filter.end()) {
        continue;
      }
      items.push_back(&it);
    }
    if (items.empty()) continue;
    const auto preds = answer_questions(model, tok, sc, items, opt);
    for (std::size_t k = 0; k < items.size(); ++k) {
      QaPrediction p{sc.record->name, items[k]->record->text, items[k]->record->answer, preds[k], false};
      p.correct = exact_match(p.prediction, p.answer);
      correct += p.correct ? 1 : 0;
      r.predictions.push_back(std::move(p));
    }
  }
  r.count = static_cast<int>(r.predictions.size());
  r.em = r.count ? static_cast<double>(correct) / r.count : 0.0;
  return r;
}

// ---------------------------------------------------------------------------
// Grounding

// Greedy one-to-one matching by descending IoU; pairs at or above the
// threshold are true positives.
inline int matched_pairs(const std::vector<Box3>& pred, const std::vector<Box3>& target, double iou_threshold) {
  struct Pair {
    double iou;
    std::size_t p, t;
  };
  std::vector<Pair> pairs;
  for (std::size_t p = 0; p < pred.size(); ++p) {
    for (std::size_t t = 0; t < target.size(); ++t) pairs.push_back({box_iou(pred[p], target[t]), p, t});
  }
  std::stable_sort(pairs.begin(), pairs.end(), [](const Pair& a, const Pair& b) { return a.iou > b.iou; });
  std::vector<bool> pu(pred.size(), false), tu(target.size(), false);
  int tp = 0;
  for (const auto& pr : pairs) {
    if (pr.iou < iou_threshold) break;
    if (pu[pr.p] || tu[pr.t]) continue;
    pu[pr.p] = tu[pr.t] = true;
    ++tp;
  }
  return tp;
}

inline double f1_score(int tp, std::size_t n_pred, std::size_t n_target) {
  if (n_pred == 0 && n_target == 0) return 1.0;
  if (tp == 0) return 0.0;
  const double p = static_cast<double>(tp) / n_pred, r = static_cast<double>(tp) / n_target;
  return 2 * p * r / (p + r);
}

struct GroundingPrediction {
  std::string scene, expression;
  std::vector<int> predicted, targets;
  std::vector<double> ious;  // per predicted id: best IoU with any target
  double score = 0;          // correctness (single) or F1 (multi)
};

struct GroundingResult {
  double accuracy = 0;  // single-target expressions
  double f1 = 0;        // multi-target expressions
  int single_count = 0, multi_count = 0, zero_target_count = 0;
  double zero_target_f1 = 0;
  int fallback_features = 0;
  std::vector<GroundingPrediction> predictions;
};

inline GroundingResult eval_grounding(const Model<float>& model, const std::vector<PreparedScene>& scenes, double iou_threshold = 0.25) {
  GroundingResult r;
  double acc = 0, f1 = 0, zf1 = 0;
  const auto& bb = model.backbone();
  for (const auto& sc : scenes) {
    const auto& items = sc.of(TaskTag::ground);
    if (items.empty()) continue;
    std::vector<TextSegment> segs;
    for (const auto& it : items) segs.push_back({it.text.ids, std::vector<int>(it.text.ids.size(), -1)});
    Tape<float> tape(false);
    const VisualTokens<float> vis = bb.embed_video(tape, sc.video, ViewMask::all_visible(sc.video.views));
    const LmOutput<float> lm = bb.forward(tape, vis.tokens, segs);
    auto box_of = [&](int id) {
      for (const auto& p : sc.proposals) {
        if (p.id == id) return p.box;
      }
      throw std::logic_error("eval_grounding: unknown proposal id");
    };
    for (std::size_t k = 0; k < items.size(); ++k) {
      const GroundingSample gs = grounding_sample(sc, items[k]);
      const GroundingForward<float> g =
          grounding_forward(tape, model.grounding(), lm, sc.video.tokens, gs, lm.segment_offsets[k] + gs.ground_position, bb.config().band);
      r.fallback_features += g.fallbacks;
      std::vector<double> sims(g.ids.size());
      for (std::size_t c = 0; c < sims.size(); ++c) sims[c] = g.logits.value()(0, static_cast<Eigen::Index>(c));
      GroundingPrediction pred;
      pred.scene = sc.record->name;
      pred.expression = items[k].record->text;
      pred.targets = gs.targets;
      std::vector<Box3> tboxes;
      for (int t : gs.targets) tboxes.push_back(sc.record->spec.find(t)->box);
      if (gs.targets.size() == 1) {
        pred.predicted = {select_single(g.ids, sims)};
      } else {
        pred.predicted = select_multi(g.ids, softmax(sims));
      }
      std::vector<Box3> pboxes;
      for (int id : pred.predicted) {
        pboxes.push_back(box_of(id));
        double best = 0;
        for (const auto& tb : tboxes) best = std::max(best, box_iou(pboxes.back(), tb));
        pred.ious.push_back(best);
      }
      if (gs.targets.size() == 1) {
        pred.score = pred.ious.front() >= iou_threshold ? 1.0 : 0.0;
        acc += pred.score;
        ++r.single_count;
      } else {
        pred.score = f1_score(matched_pairs(pboxes, tboxes, iou_threshold), pboxes.size(), tboxes.size());
        if (gs.targets.empty()) {
          zf1 += pred.score;
          ++r.zero_target_count;
        } else {
          f1 += pred.score;
          ++r.multi_count;
        }
      }
      r.predictions.push_back(std::move(pred));
    }
  }
  r.accuracy = r.single_count ? acc / r.single_count : 0.0;
  r.f1 = r.multi_count ? f1 / r.multi_count : 0.0;
  r.zero_target_f1 = r.zero_target_count ? zf1 / r.zero_target_count : 0.0;
  return r;
}

// ---------------------------------------------------------------------------
// Reconstruction

// z0 estimate from one denoiser evaluation.
template <class T>
Mat<T> single_step_estimate(const NoiseSchedule& s, const Mat<T>& z_t, const Mat<T>& eps_hat, int t) {
  const double ab = s.alpha_bar(t);
  return (z_t - static_cast<T>(std::sqrt(1.0 - ab)) * eps_hat) / static_cast<T>(std::sqrt(ab));
}

// PSNR over pixels with valid != 0 (all pixels when `valid` is empty), for
// images in [0,1].
inline double psnr(const std::vector<float>& a, const std::vector<float>& b, const std::vector<std::uint8_t>& valid = {}) {
  if (a.size() != b.size()) throw std::invalid_argument("psnr: size mismatch");
  double se = 0;
  std::size_t n = 0;
  for (std::size_t p = 0; p < a.size() / 3; ++p) {
    if (!valid.empty() && !valid[p]) continue;
    for (int c = 0; c < 3; ++c) {
      const double d = a[p * 3 + c] - b[p * 3 + c];
      se += d * d;
    }
    n += 3;
  }
  if (n == 0) return 0.0;
  const double mse = std::max(se / n, 1e-10);
  return 10.0 * std::log10(1.0 / mse);
}

struct ReconResult {
  double psnr_view = 0, psnr_bev = 0;
  double teacher_psnr_view = 0, teacher_psnr_bev = 0;
  int views = 0, bevs = 0;
};

struct ReconOptions {
  int t = 500;
  double gamma = 0.25;
  std::uint64_t seed = 1234;
  bool oracle_noise = false;  // use the true noise instead of the prediction
};

inline ReconResult eval_reconstruction(const Model<float>& model, const Teacher& teacher, const std::vector<PreparedScene>& scenes,
                                       const ReconOptions& opt = {}) {
  ReconResult r;
  const auto& bb = model.backbone();
  Rng rng(opt.seed);
  double pv = 0, pb = 0, tv = 0, tb = 0;
  for (const auto& sc : scenes) {
    const int views = sc.video.views;
    const ViewMask mask = opt.gamma > 0 && masked_view_count(views, opt.gamma) > 0 ? sample_view_mask(views, opt.gamma, rng)
                                                                                   : ViewMask::all_visible(views);
    Tape<float> tape(false);
    const LmOutput<float> lm = bb.forward(tape, bb.embed_video(tape, sc.video, mask).tokens, {});
    auto reconstruct = [&](const Mat<float>& z0, LatentSource src) {
      const Denoiser<float>& den = model.denoiser(src);
      const Mat<float> eps = randn<float>(z0.rows(), z0.cols(), 1.0, rng);
      const NoisySample<float> ns = forward_diffuse(den.schedule(), z0, opt.t, eps);
      Mat<float> eps_hat = eps;
      if (!opt.oracle_noise) {
        Var<float> base = den.condition_base(tape, lm.visual_hidden);
        eps_hat = den.predict_noise(tape, ns.z_t, den.make_condition(tape, base, opt.t, src)).value();
      }
      LatentGrid g;
      g.height = den.config().latent_height;
      g.width = den.config().latent_width;
      g.channels = den.config().latent_dim;
      g.source = src;
      g.tokens = single_step_estimate(den.schedule(), ns.z_t, eps_hat, opt.t);
      return teacher.decode(g);
    };
    auto teacher_recon = [&](const Mat<float>& z0) {
      LatentGrid g;
      g.height = model.denoiser(LatentSource::view).config().latent_height;
      g.width = model.denoiser(LatentSource::view).config().latent_width;
      g.channels = static_cast<int>(z0.cols());
      g.tokens = z0;
      return teacher.decode(g);
    };
    for (int j : mask.masked_views()) {
      const auto& f = sc.record->frames[static_cast<std::size_t>(j)];
      std::vector<std::uint8_t> valid(f.depth.size());
      for (std::size_t k = 0; k < valid.size(); ++k) valid[k] = f.depth[k] > 0;
      const Mat<float>& z0 = sc.view_latents[static_cast<std::size_t>(j)];
      pv += psnr(reconstruct(z0, LatentSource::view), f.rgb, valid);
      tv += psnr(teacher_recon(z0), f.rgb, valid);
      ++r.views;
    }
    if (std::any_of(sc.bev_pixel_valid.begin(), sc.bev_pixel_valid.end(), [](std::uint8_t v) { return v != 0; })) {
      pb += psnr(reconstruct(sc.bev_latent, LatentSource::bev), sc.record->bev.rgb, sc.bev_pixel_valid);
      tb += psnr(teacher_recon(sc.bev_latent), sc.record->bev.rgb, sc.bev_pixel_valid);
      ++r.bevs;
    }
  }
  if (r.views) r.psnr_view = pv / r.views, r.teacher_psnr_view = tv / r.views;
  if (r.bevs) r.psnr_bev = pb / r.bevs, r.teacher_psnr_bev = tb / r.bevs;
  return r;
}

// ---------------------------------------------------------------------------
// Report

struct Metrics {
  double qa_em = 0;
  double ground_acc = 0;  // Acc@0.25, single target
  double ground_f1 = 0;   // F1@0.25, multi target
  double recon_psnr_view = 0;
  double recon_psnr_bev = 0;

  nlohmann::json to_json() const {
    return {{"qa_em", qa_em}, {"ground_acc@0.25", ground_acc}, {"ground_f1@0.25", ground_f1}, {"recon_psnr_view", recon_psnr_view},
            {"recon_psnr_bev", recon_psnr_bev}};
  }

  void validate() const {
    for (double v : {qa_em, ground_acc, ground_f1}) {
      if (v < 0 || v > 1) throw std::logic_error("metrics: fraction outside [0, 1]");
    }
    if (!(recon_psnr_view > 0) || !(recon_psnr_bev > 0)) throw std::logic_error("metrics: non-positive PSNR");
  }
};

struct EvalOutput {
  Metrics metrics;
  QaResult qa;
  GroundingResult grounding;
  ReconResult recon;
};

inline EvalOutput evaluate(const Model<float>& model, const Teacher& teacher, const Tokenizer& tok,
                           const std::vector<PreparedScene>& scenes, bool with_recon = true) {
  EvalOutput e;
  e.qa = eval_qa(model, tok, scenes);
  e.grounding = eval_grounding(model, scenes, 0.25);
  if (with_recon) e.recon = eval_reconstruction(model, teacher, scenes);
  e.metrics = {e.qa.em, e.grounding.accuracy, e.grounding.f1, e.recon.psnr_view, e.recon.psnr_bev};
  return e;
}

inline nlohmann::json eval_details_json(const EvalOutput& e) {
  nlohmann::json qa = nlohmann::json::array(), gr = nlohmann::json::array();
  for (const auto& p : e.qa.predictions) {
    qa.push_back({{"scene", p.scene}, {"question", p.question}, {"answer", p.answer}, {"prediction", p.prediction}, {"correct", p.correct}});
  }
  for (const auto& p : e.grounding.predictions) {
    gr.push_back({{"scene", p.scene}, {"expression", p.expression}, {"predicted", p.predicted}, {"targets", p.targets},
                  {"ious", p.ious}, {"score", p.score}});
  }
  return {{"metrics", e.metrics.to_json()},
          {"counts",
           {{"qa", e.qa.count}, {"ground_single", e.grounding.single_count}, {"ground_multi", e.grounding.multi_count},
            {"ground_zero_target", e.grounding.zero_target_count}, {"recon_views", e.recon.views}, {"recon_bevs", e.recon.bevs}}},
          {"teacher_psnr", {{"view", e.recon.teacher_psnr_view}, {"bev", e.recon.teacher_psnr_bev}}},
          {"ground_zero_target_f1", e.grounding.zero_target_f1},
          {"ground_fallback_features", e.grounding.fallback_features},
          {"qa_predictions", qa},
          {"grounding_predictions", gr}};
}

}  // namespace recon3d
