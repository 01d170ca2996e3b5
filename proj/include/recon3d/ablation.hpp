#pragma once

// Multi-arm, multi-seed comparisons on fixed data: the pretext-task arms
// (baseline, +vanilla, +cross, +global, +both) and the semi-supervised arms.

#include "recon3d/eval.hpp"

#include <nlohmann/json.hpp>

#include <cctype>
#include <cmath>
#include <filesystem>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

namespace recon3d {

struct ArmSpec {
  std::string name;
  nlohmann::json overrides;  // merged into the base train config
};

inline std::vector<ArmSpec> pretext_arms() {
  return {
      {"baseline", {{"use_cross", false}, {"use_global", false}, {"use_vanilla", false}}},
      {"+vanilla", {{"use_cross", false}, {"use_global", false}, {"use_vanilla", true}}},
      {"+cross", {{"use_cross", true}, {"use_global", false}, {"use_vanilla", false}}},
      {"+global", {{"use_cross", false}, {"use_global", true}, {"use_vanilla", false}}},
      {"+both", {{"use_cross", true}, {"use_global", true}, {"use_vanilla", false}}},
  };
}

inline std::vector<ArmSpec> semi_arms() {
  return {
      {"50% text", {{"labeled_fraction", 0.5}, {"unlabeled_3d", false}, {"use_cross", false}, {"use_global", false}}},
      {"50% text+3d", {{"labeled_fraction", 0.5}, {"unlabeled_3d", false}, {"use_cross", true}, {"use_global", true}}},
      {"50% text+3d, +50% 3d", {{"labeled_fraction", 0.5}, {"unlabeled_3d", true}, {"use_cross", true}, {"use_global", true}}},
      {"100% text", {{"labeled_fraction", 1.0}, {"use_cross", false}, {"use_global", false}}},
  };
}

struct AblationGrid {
  std::string kind = "pretext";  // "pretext", "semi" or "custom"
  nlohmann::json base = nlohmann::json::object();
  std::vector<ArmSpec> arms;
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  bool eval_reconstruction = true;

  static AblationGrid from_json(const nlohmann::json& j) {
    AblationGrid g;
    g.kind = j.value("kind", "pretext");
    g.base = j.value("base", nlohmann::json::object());
    if (j.contains("seeds")) g.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    g.eval_reconstruction = j.value("eval_reconstruction", true);
    if (j.contains("arms")) {
      for (const auto& a : j.at("arms")) g.arms.push_back({a.at("name").get<std::string>(), a.value("overrides", nlohmann::json::object())});
    } else if (g.kind == "pretext") {
      g.arms = pretext_arms();
    } else if (g.kind == "semi") {
      g.arms = semi_arms();
    } else {
      throw std::invalid_argument("ablation grid: kind '" + g.kind + "' needs an explicit arm list");
    }
    if (g.arms.empty()) throw std::invalid_argument("ablation grid: no arms");
    if (g.seeds.empty()) throw std::invalid_argument("ablation grid: no seeds");
    return g;
  }

  TrainConfig arm_config(const ArmSpec& arm, std::uint64_t seed) const {
    nlohmann::json j = base;
    j.merge_patch(arm.overrides);
    TrainConfig c = train_config_from_json(j);
    c.seed = seed;
    c.model.init_seed = seed;
    return c;
  }
};

struct MetricStats {
  double mean = 0, std = 0;  // sample standard deviation
};

inline MetricStats stats(const std::vector<double>& v) {
  MetricStats s;
  if (v.empty()) return s;
  for (double x : v) s.mean += x;
  s.mean /= static_cast<double>(v.size());
  if (v.size() > 1) {
    double ss = 0;
    for (double x : v) ss += (x - s.mean) * (x - s.mean);
    s.std = std::sqrt(ss / static_cast<double>(v.size() - 1));
  }
  return s;
}

struct ArmResult {
  std::string name;
  std::vector<Metrics> runs;
  std::vector<int> applications_3d;

  std::vector<double> values(double Metrics::*field) const {
    std::vector<double> v;
    for (const auto& m : runs) v.push_back(m.*field);
    return v;
  }
  MetricStats stat(double Metrics::*field) const { return stats(values(field)); }
};

struct AblationResult {
  std::string kind;
  std::vector<ArmResult> arms;

  const ArmResult& arm(const std::string& name) const {
    for (const auto& a : arms) {
      if (a.name == name) return a;
    }
    throw std::out_of_range("ablation: no arm named " + name);
  }
};

inline const std::vector<std::pair<const char*, double Metrics::*>>& metric_fields() {
  static const std::vector<std::pair<const char*, double Metrics::*>> k{
      {"qa_em", &Metrics::qa_em},
      {"ground_acc@0.25", &Metrics::ground_acc},
      {"ground_f1@0.25", &Metrics::ground_f1},
      {"recon_psnr_view", &Metrics::recon_psnr_view},
      {"recon_psnr_bev", &Metrics::recon_psnr_bev},
  };
  return k;
}

inline nlohmann::json to_json(const AblationResult& r) {
  nlohmann::json arms = nlohmann::json::array();
  for (const auto& a : r.arms) {
    nlohmann::json runs = nlohmann::json::array(), summary = nlohmann::json::object();
    for (const auto& m : a.runs) runs.push_back(m.to_json());
    for (const auto& [name, field] : metric_fields()) {
      const MetricStats s = a.stat(field);
      summary[name] = {{"mean", s.mean}, {"std", s.std}};
    }
    arms.push_back({{"name", a.name}, {"runs", runs}, {"summary", summary}, {"applications_3d", a.applications_3d}});
  }
  return {{"kind", r.kind}, {"arms", arms}};
}

inline AblationResult ablation_from_json(const nlohmann::json& j) {
  AblationResult r;
  r.kind = j.at("kind");
  for (const auto& a : j.at("arms")) {
    ArmResult ar;
    ar.name = a.at("name");
    for (const auto& m : a.at("runs")) {
      Metrics x;
      x.qa_em = m.at("qa_em");
      x.ground_acc = m.at("ground_acc@0.25");
      x.ground_f1 = m.at("ground_f1@0.25");
      x.recon_psnr_view = m.at("recon_psnr_view");
      x.recon_psnr_bev = m.at("recon_psnr_bev");
      ar.runs.push_back(x);
    }
    ar.applications_3d = a.value("applications_3d", std::vector<int>{});
    r.arms.push_back(std::move(ar));
  }
  return r;
}

// Plain-text table, one row per arm in grid order: mean ± std per metric.
inline std::string ablation_table(const AblationResult& r) {
  std::ostringstream s;
  s << "| arm |";
  for (const auto& [name, field] : metric_fields()) s << " " << name << " |";
  s << "\n|---|";
  for (std::size_t k = 0; k < metric_fields().size(); ++k) s << "---|";
  s << "\n";
  char buf[64];
  for (const auto& a : r.arms) {
    s << "| " << a.name << " |";
    for (const auto& [name, field] : metric_fields()) {
      const MetricStats st = a.stat(field);
      std::snprintf(buf, sizeof(buf), " %.4f ± %.4f |", st.mean, st.std);
      s << buf;
    }
    s << "\n";
  }
  return s.str();
}

using AblationProgress = std::function<void(const std::string& arm, std::uint64_t seed, const Metrics&)>;

inline std::string arm_slug(const std::string& name) {
  std::string s;
  for (char ch : name) {
    if (std::isalnum(static_cast<unsigned char>(ch))) s += ch;
    else if (ch == '+') s += "plus_";
    else if (!s.empty() && s.back() != '_') s += '_';
  }
  while (!s.empty() && s.back() == '_') s.pop_back();
  return s;
}

// Every arm trains on the same prepared scenes with the same seeds; only the
// arm overrides differ. With `out_dir` set, each run writes its loss log and
// checkpoint to out_dir/runs/<arm>_seed<k>.
inline AblationResult run_ablation(const AblationGrid& grid, const std::vector<PreparedScene>& train_scenes,
                                   const std::vector<PreparedScene>& eval_scenes, const Teacher& teacher, const Tokenizer& tok,
                                   const AblationProgress& progress = {}, const std::filesystem::path& out_dir = {}) {
  AblationResult res;
  res.kind = grid.kind;
  for (const auto& arm : grid.arms) {
    ArmResult ar;
    ar.name = arm.name;
    for (std::uint64_t seed : grid.seeds) {
      const TrainConfig cfg = grid.arm_config(arm, seed);
      const SemiSplit split = regime_split(static_cast<int>(train_scenes.size()), cfg);
      Model<float> model(cfg.model);
      std::filesystem::path run_dir;
      if (!out_dir.empty()) run_dir = out_dir / "runs" / (arm_slug(arm.name) + "_seed" + std::to_string(seed));
      const TrainResult tr = train(model, train_scenes, split.labeled, split.unlabeled, cfg, run_dir);
      EvalOutput e = evaluate(model, teacher, tok, eval_scenes, grid.eval_reconstruction);
      ar.runs.push_back(e.metrics);
      ar.applications_3d.push_back(tr.applications_3d);
      if (progress) progress(arm.name, seed, e.metrics);
    }
    res.arms.push_back(std::move(ar));
  }
  return res;
}

}  // namespace recon3d
