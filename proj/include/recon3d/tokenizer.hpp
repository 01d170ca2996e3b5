#pragma once

// Word-level tokenizer over the closed template vocabulary.

#include "recon3d/annotations.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace recon3d {

class Tokenizer {
 public:
  static constexpr int pad = 0;
  static constexpr int bos = 1;
  static constexpr int eos = 2;
  static constexpr int ground = 3;
  static constexpr int unk = 4;

  // Specials followed by every word the annotation templates can emit.
  static Tokenizer standard() {
    std::vector<std::string> words{"<pad>", "<bos>", "<eos>", "<ground>", "<unk>",
                                   "question", "caption", "answer", ":", "?",
                                   "how", "many", "objects", "are", "there", "what", "color", "is", "the", "a",
                                   "describe", "in", "all", "yes", "no", "north", "south", "east", "west"};
    for (const auto& n : number_words()) words.push_back(n);
    for (const auto& c : palette()) words.emplace_back(c.name);
    for (const auto& c : object_classes()) words.emplace_back(c.name);
    for (const auto* c : absent_classes()) words.emplace_back(c);
    return Tokenizer(std::move(words));
  }

  explicit Tokenizer(std::vector<std::string> words) : words_(std::move(words)) {
    if (words_.size() < 5 || words_[pad] != "<pad>" || words_[bos] != "<bos>" || words_[eos] != "<eos>" ||
        words_[ground] != "<ground>" || words_[unk] != "<unk>") {
      throw std::invalid_argument("tokenizer: vocabulary must start with <pad> <bos> <eos> <ground> <unk>");
    }
    for (std::size_t i = 0; i < words_.size(); ++i) {
      if (!index_.emplace(words_[i], static_cast<int>(i)).second) throw std::invalid_argument("tokenizer: duplicate word " + words_[i]);
    }
  }

  int size() const { return static_cast<int>(words_.size()); }
  const std::string& word(int id) const { return words_.at(static_cast<std::size_t>(id)); }

  int id(const std::string& w) const {
    auto it = index_.find(w);
    return it == index_.end() ? unk : it->second;
  }

  std::vector<int> encode(const std::string& text) const {
    std::istringstream in(normalize(text));
    std::vector<int> ids;
    for (std::string w; in >> w;) ids.push_back(id(w));
    return ids;
  }

  std::string decode(const std::vector<int>& ids) const {
    std::string s;
    for (int t : ids) {
      if (t == eos) break;
      if (t == pad || t == bos) continue;
      if (!s.empty()) s += ' ';
      s += word(t);
    }
    return s;
  }

  // Lowercase, trim, collapse whitespace.
  static std::string normalize(const std::string& text) {
    std::string out;
    bool space = false;
    for (char ch : text) {
      if (std::isspace(static_cast<unsigned char>(ch))) {
        space = !out.empty();
        continue;
      }
      if (space) out += ' ';
      space = false;
      out += static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    }
    return out;
  }

  void save(const std::string& path) const {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write vocabulary file " + path);
    for (const auto& w : words_) f << w << '\n';
  }

  static Tokenizer load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot read vocabulary file " + path);
    std::vector<std::string> words;
    for (std::string line; std::getline(f, line);) {
      if (!line.empty()) words.push_back(line);
    }
    return Tokenizer(std::move(words));
  }

  bool operator==(const Tokenizer& o) const { return words_ == o.words_; }

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, int> index_;
};

inline std::string prompt_prefix(TaskTag t) {
  switch (t) {
    case TaskTag::qa: return "question :";
    case TaskTag::caption: return "caption :";
    case TaskTag::ground: return "ground :";
  }
  return "";
}

// Text part of a training sequence: token ids plus the next-token target of
// every text position (-1 where unsupervised). Position k's logits predict
// ids[k + 1]; only answer tokens and the closing <eos> are targets.
struct TextSequence {
  std::vector<int> ids;
  std::vector<int> targets;
  int ground_position = -1;  // index into ids of the <ground> token
  int prompt_length = 0;
};

inline TextSequence build_text(const Tokenizer& tok, const AnnotationRecord& rec, bool with_answer = true) {
  TextSequence s;
  s.ids.push_back(Tokenizer::bos);
  for (int t : tok.encode(prompt_prefix(rec.task) + " " + rec.text)) s.ids.push_back(t);
  if (rec.task == TaskTag::ground) {
    s.ids.push_back(Tokenizer::ground);
    s.ground_position = static_cast<int>(s.ids.size()) - 1;
  } else {
    s.ids.push_back(tok.id("answer"));
    s.ids.push_back(tok.id(":"));
  }
  s.prompt_length = static_cast<int>(s.ids.size());
  if (rec.task != TaskTag::ground && with_answer) {
    for (int t : tok.encode(rec.answer)) s.ids.push_back(t);
    s.ids.push_back(Tokenizer::eos);
  }
  s.targets.assign(s.ids.size(), -1);
  for (std::size_t k = 0; k + 1 < s.ids.size(); ++k) {
    if (static_cast<int>(k + 1) >= s.prompt_length) s.targets[k] = s.ids[k + 1];
  }
  return s;
}

}  // namespace recon3d
