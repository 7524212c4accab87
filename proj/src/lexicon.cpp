#include "n3d/lexicon.hpp"

#include <algorithm>
#include <sstream>

#include "n3d/errors.hpp"

namespace n3d {

namespace words {

const std::vector<std::string>& sites() {
  static const std::vector<std::string> v{"top", "bottom", "left side", "right side", "front", "back"};
  return v;
}

const std::vector<std::string>& part_nouns() {
  static const std::vector<std::string> v{"hat",  "barrel", "handle", "wing", "leg",  "wheel",   "antenna", "tail",
                                          "horn", "fin",    "arm",    "spout", "lid", "knob", "chimney", "ear"};
  return v;
}

const std::vector<std::string>& body_nouns() {
  static const std::vector<std::string> v{"robot", "plane", "kettle", "car",      "tower",
                                          "boat",  "wizard", "house", "creature", "lamp"};
  return v;
}

const std::vector<std::string>& body_adjectives() {
  static const std::vector<std::string> v{"toy", "small", "big", "tall", "round", "old", "tiny", "shiny"};
  return v;
}

const std::vector<std::string>& colors() {
  static const std::vector<std::string> v{"red",  "orange", "yellow",  "lime", "green", "teal", "cyan", "blue",
                                          "navy", "purple", "magenta", "pink", "brown", "gray", "white"};
  return v;
}

}  // namespace words

Lexicon::Lexicon(std::vector<std::string> words) : words_(std::move(words)) {
  for (std::size_t i = 0; i < words_.size(); ++i) {
    const std::string& w = words_[i];
    if (w.empty() || w.find_first_of(" \t\r\n") != std::string::npos)
      throw ConfigError("lexicon entry " + std::to_string(i + 1) + " is not a single token");
    if (!ids_.emplace(w, static_cast<int>(i + 1)).second) throw ConfigError("duplicate lexicon entry '" + w + "'");
  }
}

const Lexicon& Lexicon::standard() {
  static const Lexicon lex = [] {
    std::vector<std::string> w{",", "delete", "add", "change", "the", "a", "on", "to", "with", "and", "body"};
    for (const auto& s : words::sites()) {
      std::istringstream in(s);
      for (std::string t; in >> t;)
        if (std::find(w.begin(), w.end(), t) == w.end()) w.push_back(t);
    }
    for (const auto* list : {&words::part_nouns(), &words::body_nouns(), &words::body_adjectives(), &words::colors()})
      w.insert(w.end(), list->begin(), list->end());
    return Lexicon(std::move(w));
  }();
  return lex;
}

std::optional<int> Lexicon::find(std::string_view word) const {
  auto it = ids_.find(std::string(word));
  if (it == ids_.end()) return std::nullopt;
  return it->second;
}

int Lexicon::id(std::string_view word) const {
  if (auto i = find(word)) return *i;
  throw VocabError("unknown word '" + std::string(word) + "'");
}

const std::string& Lexicon::word(int id) const {
  if (id < 1 || static_cast<std::size_t>(id) > words_.size())
    throw VocabError("token id " + std::to_string(id) + " is outside the lexicon");
  return words_[static_cast<std::size_t>(id - 1)];
}

std::vector<int> Lexicon::tokenize(std::string_view text) const {
  std::vector<int> ids;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) ids.push_back(id(cur));
    cur.clear();
  };
  for (char c : text) {
    if (c == ' ' || c == '\t' || c == '\n' || c == '\r') {
      flush();
    } else if (c == ',') {
      flush();
      ids.push_back(id(","));
    } else {
      cur.push_back(c);
    }
  }
  flush();
  if (ids.empty()) throw VocabError("empty instruction");
  if (ids.size() > kMaxTokens)
    throw VocabError("instruction has " + std::to_string(ids.size()) + " tokens (max " + std::to_string(kMaxTokens) + ")");
  return ids;
}

std::string Lexicon::detokenize(std::span<const int> ids) const {
  std::string out;
  for (int i : ids) {
    const std::string& w = word(i);
    if (!out.empty() && w != ",") out.push_back(' ');
    out += w;
  }
  return out;
}

std::string Lexicon::to_text() const {
  std::string out;
  for (const auto& w : words_) out += w + "\n";
  return out;
}

Lexicon Lexicon::from_text(std::string_view text) {
  std::vector<std::string> w;
  std::size_t start = 0;
  while (start < text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    std::string line(text.substr(start, end - start));
    if (!line.empty() && line.back() == '\r') line.pop_back();
    w.push_back(line);
    start = end + 1;
  }
  return Lexicon(std::move(w));
}

}  // namespace n3d
