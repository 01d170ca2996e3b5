#pragma once

// Templated question answering, captions and referring expressions whose
// answers are computed straight from the SceneSpec.

#include "recon3d/scene.hpp"

#include <algorithm>
#include <map>
#include <random>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

namespace recon3d {

enum class TaskTag { qa, caption, ground };

inline const char* to_string(TaskTag t) {
  switch (t) {
    case TaskTag::qa: return "qa";
    case TaskTag::caption: return "caption";
    case TaskTag::ground: return "ground";
  }
  return "?";
}

inline TaskTag parse_task_tag(const std::string& s) {
  if (s == "qa") return TaskTag::qa;
  if (s == "caption") return TaskTag::caption;
  if (s == "ground") return TaskTag::ground;
  throw std::invalid_argument("unknown task tag: " + s);
}

struct AnnotationRecord {
  TaskTag task = TaskTag::qa;
  std::string text;    // question, caption prompt or referring expression
  std::string answer;  // empty for grounding
  std::vector<int> targets;  // referenced object ids

  bool operator==(const AnnotationRecord&) const = default;
};

struct SceneAnnotations {
  std::vector<AnnotationRecord> records;

  std::vector<const AnnotationRecord*> of(TaskTag t) const {
    std::vector<const AnnotationRecord*> out;
    for (const auto& r : records) {
      if (r.task == t) out.push_back(&r);
    }
    return out;
  }
};

inline const std::vector<std::string>& number_words() {
  static const std::vector<std::string> k{"zero", "one", "two", "three", "four", "five", "six", "seven", "eight"};
  return k;
}

inline std::string count_word(std::size_t n) {
  const auto& w = number_words();
  if (n >= w.size()) throw std::out_of_range("count_word: count too large");
  return w[n];
}

// Quadrant of a point relative to the room center; +y is north, +x is east.
inline std::string quadrant(const SceneSpec& scene, const Vec3& p) {
  const Vec3 c = scene.room.center();
  return std::string(p.y() >= c.y() ? "north" : "south") + " " + (p.x() >= c.x() ? "east" : "west");
}

inline SceneAnnotations make_annotations(const SceneSpec& scene, std::mt19937_64& rng) {
  if (scene.objects.empty()) throw std::invalid_argument("make_annotations: scene has no objects");
  SceneAnnotations ann;
  auto& out = ann.records;

  std::map<std::string, std::vector<int>> by_class, by_color;
  std::map<std::pair<std::string, std::string>, std::vector<int>> by_pair;
  for (const auto& o : scene.objects) {
    by_class[o.label].push_back(o.id);
    by_color[o.color_name].push_back(o.id);
    by_pair[{o.color_name, o.label}].push_back(o.id);
  }

  // Counting by color: every present color plus one absent color.
  std::vector<std::string> absent_colors;
  for (const auto& c : palette()) {
    if (!by_color.count(c.name)) absent_colors.push_back(c.name);
  }
  for (const auto& [color, ids] : by_color) {
    out.push_back({TaskTag::qa, "how many " + color + " objects are there ?", count_word(ids.size()), ids});
  }
  if (!absent_colors.empty()) {
    const auto& c = absent_colors[std::uniform_int_distribution<std::size_t>(0, absent_colors.size() - 1)(rng)];
    out.push_back({TaskTag::qa, "how many " + c + " objects are there ?", "zero", {}});
  }

  // Color of a class that occurs once; count of every present class.
  for (const auto& [label, ids] : by_class) {
    if (ids.size() == 1) {
      const SceneObject* o = scene.find(ids.front());
      out.push_back({TaskTag::qa, "what color is the " + label + " ?", o->color_name, ids});
    }
    out.push_back({TaskTag::qa, "how many " + label + " are there ?", count_word(ids.size()), ids});
  }

  // Existence: one present and one absent class.
  {
    std::vector<std::string> present, missing;
    for (const auto& c : object_classes()) (by_class.count(c.name) ? present : missing).push_back(c.name);
    const auto& p = present[std::uniform_int_distribution<std::size_t>(0, present.size() - 1)(rng)];
    out.push_back({TaskTag::qa, "is there a " + p + " ?", "yes", by_class[p]});
    if (!missing.empty()) {
      const auto& m = missing[std::uniform_int_distribution<std::size_t>(0, missing.size() - 1)(rng)];
      out.push_back({TaskTag::qa, "is there a " + m + " ?", "no", {}});
    }
  }

  // Captions for objects that a short phrase identifies uniquely.
  for (const auto& o : scene.objects) {
    std::string name;
    if (by_class[o.label].size() == 1) {
      name = o.label;
    } else if (by_pair[{o.color_name, o.label}].size() == 1) {
      name = o.color_name + " " + o.label;
    } else {
      continue;
    }
    out.push_back({TaskTag::caption, "describe the " + name,
                   o.color_name + " " + o.label + " in the " + quadrant(scene, o.box.center()), {o.id}});
  }

  // Grounding: single-target, multi-target and zero-target expressions.
  for (const auto& [key, ids] : by_pair) {
    if (ids.size() == 1) out.push_back({TaskTag::ground, "the " + key.first + " " + key.second, "", ids});
  }
  for (const auto& [label, ids] : by_class) {
    if (ids.size() == 1) {
      out.push_back({TaskTag::ground, "the " + label, "", ids});
    } else {
      out.push_back({TaskTag::ground, "all " + label, "", ids});
    }
  }
  for (const auto& [color, ids] : by_color) {
    if (ids.size() >= 2) out.push_back({TaskTag::ground, "all " + color + " objects", "", ids});
  }
  {
    const auto& z = absent_classes();
    out.push_back({TaskTag::ground, std::string("the ") + z[std::uniform_int_distribution<std::size_t>(0, z.size() - 1)(rng)],
                   "", {}});
  }

  for (auto& r : out) std::sort(r.targets.begin(), r.targets.end());
  return ann;
}

}  // namespace recon3d
