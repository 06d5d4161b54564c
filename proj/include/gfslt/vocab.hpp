#pragma once

// Whitespace tokenizer and vocabulary with a fixed special-token table:
// <pad>=0, <bos>=1, <eos>=2, <unk>=3.

#include <algorithm>
#include <cctype>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "gfslt/errors.hpp"
#include "gfslt/types.hpp"

namespace gfslt {

inline std::vector<std::string> tokenize(const std::string& text) {
  std::string lower;
  lower.reserve(text.size());
  for (char c : text) lower.push_back(static_cast<char>(std::tolower(
      static_cast<unsigned char>(c))));
  std::istringstream iss(lower);
  std::vector<std::string> out;
  std::string tok;
  while (iss >> tok) out.push_back(tok);
  return out;
}

class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kUnk = 3;

  Vocabulary() {
    for (const char* s : {"<pad>", "<bos>", "<eos>", "<unk>"}) add_word(s);
  }

  // Builds the non-special table from a corpus, sorted for determinism.
  static Vocabulary from_corpus(const std::vector<std::string>& texts) {
    Vocabulary v;
    std::vector<std::string> words;
    for (const auto& t : texts)
      for (const auto& w : tokenize(t)) words.push_back(w);
    std::sort(words.begin(), words.end());
    words.erase(std::unique(words.begin(), words.end()), words.end());
    for (const auto& w : words) v.add_word(w);
    return v;
  }

  int size() const { return static_cast<int>(id_to_word_.size()); }

  int id(const std::string& word) const {
    auto it = word_to_id_.find(word);
    return it == word_to_id_.end() ? kUnk : it->second;
  }

  const std::string& word(int id) const {
    if (id < 0 || id >= size()) throw LookupError("vocab: id out of range");
    return id_to_word_[id];
  }

  const std::vector<std::string>& words() const { return id_to_word_; }

  TokenSequence encode(const std::string& text) const {
    TokenSequence seq;
    seq.text = text;
    for (const auto& w : tokenize(text)) seq.ids.push_back(id(w));
    return seq;
  }

  std::string decode(const std::vector<int>& ids) const {
    std::string out;
    for (int i : ids) {
      if (i == kPad || i == kBos || i == kEos) continue;
      if (!out.empty()) out += ' ';
      out += word(i);
    }
    return out;
  }

  void add_word(const std::string& w) {
    if (word_to_id_.count(w)) return;
    word_to_id_[w] = size();
    id_to_word_.push_back(w);
  }

 private:
  std::map<std::string, int> word_to_id_;
  std::vector<std::string> id_to_word_;
};

}  // namespace gfslt
