#pragma once

// Run reports: report.json (config snapshot, metrics, loss curves) plus PNG
// plots of every logged loss and, when the run holds an ablation result, one
// bar plot per metric. Output depends only on the run directory's contents.

#include "recon3d/ablation.hpp"
#include "recon3d/png_io.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace recon3d {

struct LossCurve {
  std::string name;
  std::vector<long> steps;
  std::vector<double> values;
};

inline const std::vector<std::string>& logged_loss_names() {
  static const std::vector<std::string> k{"total", "text", "vanilla2d", "cross", "global", "ground"};
  return k;
}

// Curves from a loss_log.jsonl; losses that never applied are left out.
inline std::vector<LossCurve> read_loss_curves(const std::filesystem::path& log_path) {
  std::ifstream in(log_path);
  if (!in) throw std::runtime_error("report: missing loss log " + log_path.string());
  std::map<std::string, LossCurve> curves;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw std::runtime_error(log_path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
    const long step = j.at("step");
    auto push = [&](const std::string& name, const nlohmann::json& v) {
      if (v.is_null()) return;
      auto& c = curves[name];
      c.name = name;
      c.steps.push_back(step);
      c.values.push_back(v.get<double>());
    };
    const bool any = std::any_of(j.at("flags").begin(), j.at("flags").end(), [](const auto& f) { return f.template get<bool>(); });
    if (any) push("total", j.at("total"));
    for (const auto& [k, v] : j.at("losses").items()) push(k, v);
  }
  if (lineno == 0) throw std::runtime_error("report: empty loss log " + log_path.string());
  std::vector<LossCurve> out;
  for (const auto& name : logged_loss_names()) {
    auto it = curves.find(name);
    if (it != curves.end()) out.push_back(it->second);
  }
  return out;
}

inline std::vector<double> ema(const std::vector<double>& v, double alpha = 0.1) {
  std::vector<double> out(v.size());
  double s = v.empty() ? 0 : v[0];
  for (std::size_t i = 0; i < v.size(); ++i) {
    s = i == 0 ? v[0] : alpha * v[i] + (1 - alpha) * s;
    out[i] = s;
  }
  return out;
}

// Minimal raster canvas for plots.
class Canvas {
 public:
  struct Color {
    std::uint8_t r, g, b;
  };

  Canvas(int w, int h, Color bg = {255, 255, 255}) : w_(w), h_(h), px_(static_cast<std::size_t>(w) * h * 3) {
    for (int i = 0; i < w * h; ++i) set_index(i, bg);
  }

  void pixel(int x, int y, Color c) {
    if (x < 0 || y < 0 || x >= w_ || y >= h_) return;
    set_index(y * w_ + x, c);
  }

  void line(double x0, double y0, double x1, double y1, Color c) {
    const int n = static_cast<int>(std::ceil(std::max(std::abs(x1 - x0), std::abs(y1 - y0)))) + 1;
    for (int k = 0; k <= n; ++k) {
      const double a = static_cast<double>(k) / n;
      pixel(static_cast<int>(std::lround(x0 + a * (x1 - x0))), static_cast<int>(std::lround(y0 + a * (y1 - y0))), c);
    }
  }

  void rect(int x0, int y0, int x1, int y1, Color c) {
    for (int y = std::min(y0, y1); y <= std::max(y0, y1); ++y) {
      for (int x = std::min(x0, x1); x <= std::max(x0, x1); ++x) pixel(x, y, c);
    }
  }

  RgbImage8 image() const { return {w_, h_, px_}; }

 private:
  void set_index(int i, Color c) {
    px_[static_cast<std::size_t>(i) * 3] = c.r;
    px_[static_cast<std::size_t>(i) * 3 + 1] = c.g;
    px_[static_cast<std::size_t>(i) * 3 + 2] = c.b;
  }
  int w_, h_;
  std::vector<std::uint8_t> px_;
};

struct PlotFrame {
  int width = 480, height = 320, margin = 24;
  double x0 = 0, x1 = 1, y0 = 0, y1 = 1;

  double px(double x) const { return margin + (x - x0) / std::max(x1 - x0, 1e-12) * (width - 2 * margin); }
  double py(double y) const { return height - margin - (y - y0) / std::max(y1 - y0, 1e-12) * (height - 2 * margin); }

  void axes(Canvas& c) const {
    const Canvas::Color k{0, 0, 0}, grid{225, 225, 225};
    for (int g = 1; g < 5; ++g) {
      const double y = margin + g * (height - 2.0 * margin) / 5;
      c.line(margin, y, width - margin, y, grid);
    }
    c.line(margin, height - margin, width - margin, height - margin, k);
    c.line(margin, margin, margin, height - margin, k);
  }
};

// Raw curve in light blue, EMA in dark blue.
inline RgbImage8 plot_curve(const LossCurve& curve) {
  PlotFrame f;
  Canvas c(f.width, f.height);
  if (!curve.values.empty()) {
    f.x0 = static_cast<double>(curve.steps.front());
    f.x1 = static_cast<double>(std::max(curve.steps.back(), curve.steps.front() + 1));
    const auto [lo, hi] = std::minmax_element(curve.values.begin(), curve.values.end());
    f.y0 = std::min(0.0, *lo);
    f.y1 = *hi > f.y0 ? *hi * 1.05 : f.y0 + 1;
  }
  f.axes(c);
  const std::vector<double> smooth = ema(curve.values);
  for (std::size_t i = 1; i < curve.values.size(); ++i) {
    c.line(f.px(static_cast<double>(curve.steps[i - 1])), f.py(curve.values[i - 1]), f.px(static_cast<double>(curve.steps[i])),
           f.py(curve.values[i]), {160, 190, 235});
  }
  for (std::size_t i = 1; i < smooth.size(); ++i) {
    c.line(f.px(static_cast<double>(curve.steps[i - 1])), f.py(smooth[i - 1]), f.px(static_cast<double>(curve.steps[i])),
           f.py(smooth[i]), {20, 50, 160});
  }
  return c.image();
}

// One bar per arm (mean) with a ±1 std whisker.
inline RgbImage8 plot_bars(const std::vector<MetricStats>& bars) {
  PlotFrame f;
  Canvas c(f.width, f.height);
  double hi = 0;
  for (const auto& b : bars) hi = std::max(hi, b.mean + b.std);
  f.x0 = 0;
  f.x1 = static_cast<double>(std::max<std::size_t>(bars.size(), 1));
  f.y0 = 0;
  f.y1 = hi > 0 ? hi * 1.1 : 1;
  f.axes(c);
  static const Canvas::Color palette[] = {{120, 120, 120}, {230, 160, 60}, {70, 140, 210}, {90, 180, 110}, {200, 70, 70}, {150, 100, 190}};
  for (std::size_t i = 0; i < bars.size(); ++i) {
    const double xl = f.px(i + 0.15), xr = f.px(i + 0.85), xm = f.px(i + 0.5);
    c.rect(static_cast<int>(xl), static_cast<int>(f.py(std::max(bars[i].mean, 0.0))), static_cast<int>(xr), static_cast<int>(f.py(0)),
           palette[i % 6]);
    c.line(xm, f.py(bars[i].mean - bars[i].std), xm, f.py(bars[i].mean + bars[i].std), {0, 0, 0});
    c.line(xm - 4, f.py(bars[i].mean + bars[i].std), xm + 4, f.py(bars[i].mean + bars[i].std), {0, 0, 0});
    c.line(xm - 4, f.py(bars[i].mean - bars[i].std), xm + 4, f.py(bars[i].mean - bars[i].std), {0, 0, 0});
  }
  return c.image();
}

namespace detail {
inline std::optional<nlohmann::json> read_json_if(const std::filesystem::path& p) {
  if (!std::filesystem::exists(p)) return std::nullopt;
  std::ifstream in(p);
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("report: cannot parse " + p.string() + ": " + e.what());
  }
}
}  // namespace detail

inline nlohmann::json report_metrics_skeleton() {
  nlohmann::json m = nlohmann::json::object();
  for (const auto& [name, field] : metric_fields()) m[name] = nullptr;
  return m;
}

// Reads <run>/loss_log.jsonl, config.json, metrics.json and ablation.json;
// writes <run>/report.json and <run>/plots/*.png. The loss log is required
// unless the directory holds an ablation result (whose per-run logs live in
// runs/*/).
inline nlohmann::json write_report(const std::filesystem::path& run) {
  if (!std::filesystem::is_directory(run)) throw std::runtime_error("report: no run directory " + run.string());
  std::vector<LossCurve> curves;
  if (std::filesystem::exists(run / "loss_log.jsonl") || !std::filesystem::exists(run / "ablation.json")) {
    curves = read_loss_curves(run / "loss_log.jsonl");
  }
  const std::filesystem::path plots = run / "plots";
  std::filesystem::create_directories(plots);

  nlohmann::json rep;
  rep["run_id"] = std::filesystem::weakly_canonical(run).filename().string();
  rep["config"] = detail::read_json_if(run / "config.json").value_or(nlohmann::json(nullptr));
  nlohmann::json metrics = report_metrics_skeleton();
  if (auto m = detail::read_json_if(run / "metrics.json")) {
    const nlohmann::json& src = m->contains("metrics") ? m->at("metrics") : *m;
    for (auto& [k, v] : metrics.items()) {
      if (src.contains(k)) v = src.at(k);
    }
  }
  rep["metrics"] = metrics;

  nlohmann::json curve_json = nlohmann::json::object(), plot_list = nlohmann::json::array();
  for (const auto& c : curves) {
    const std::vector<double> smooth = ema(c.values);
    curve_json[c.name] = {{"steps", c.steps}, {"values", c.values}, {"first", c.values.front()}, {"last_smoothed", smooth.back()}};
    const std::string file = "plots/loss_" + c.name + ".png";
    write_png((run / file).string(), plot_curve(c));
    plot_list.push_back(file);
  }
  rep["loss_curves"] = curve_json;

  if (auto a = detail::read_json_if(run / "ablation.json")) {
    const AblationResult ab = ablation_from_json(*a);
    nlohmann::json arms = nlohmann::json::array();
    for (const auto& arm : ab.arms) arms.push_back(arm.name);
    for (const auto& [name, field] : metric_fields()) {
      std::vector<MetricStats> bars;
      for (const auto& arm : ab.arms) bars.push_back(arm.stat(field));
      std::string slug = name;
      std::replace(slug.begin(), slug.end(), '@', '_');
      const std::string file = "plots/ablation_" + slug + ".png";
      write_png((run / file).string(), plot_bars(bars));
      plot_list.push_back(file);
    }
    rep["ablation"] = {{"kind", ab.kind}, {"arms", arms}, {"result", to_json(ab)}};
  }
  rep["plots"] = plot_list;

  std::ofstream out(run / "report.json");
  if (!out) throw std::runtime_error("report: cannot write " + (run / "report.json").string());
  out << rep.dump(2) << "\n";
  return rep;
}

}  // namespace recon3d
