#pragma once

#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace n3d {

// Word <-> id table. Ids are dense from 1; 0 is reserved for padding and is
// never produced by tokenize().
class Lexicon {
 public:
  explicit Lexicon(std::vector<std::string> words);

  // The built-in vocabulary used by the generator and the models.
  static const Lexicon& standard();

  // Number of embedding rows a model needs (words + the reserved id 0).
  std::size_t vocab_size() const { return words_.size() + 1; }
  std::size_t word_count() const { return words_.size(); }

  std::optional<int> find(std::string_view word) const;
  int id(std::string_view word) const;  // VocabError when absent
  const std::string& word(int id) const;

  // Lowercase words separated by single spaces; "," is its own token and
  // attaches to the preceding word. At most kMaxTokens tokens.
  std::vector<int> tokenize(std::string_view text) const;
  std::string detokenize(std::span<const int> ids) const;

  // One token per line; line number = id.
  std::string to_text() const;
  static Lexicon from_text(std::string_view text);

  static constexpr std::size_t kMaxTokens = 32;

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, int> ids_;
};

namespace words {

// Attachment sites in generation order; multi-word sites are space separated.
const std::vector<std::string>& sites();
const std::vector<std::string>& part_nouns();
const std::vector<std::string>& body_nouns();
const std::vector<std::string>& body_adjectives();
// colors()[m - 1] names material id m.
const std::vector<std::string>& colors();

inline constexpr const char* kBody = "body";

}  // namespace words

}  // namespace n3d
