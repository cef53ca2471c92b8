#pragma once

#include <algorithm>
#include <cctype>
#include <set>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace debias {

struct EmptyInput : std::runtime_error {
  EmptyInput() : std::runtime_error("tokenize: empty input") {}
};

// Lowercase whitespace word split; the only normalization applied anywhere.
inline std::vector<std::string> normalize_words(const std::string& text) {
  std::vector<std::string> words;
  std::string cur;
  for (char ch : text) {
    if (std::isspace(static_cast<unsigned char>(ch))) {
      if (!cur.empty()) {
        words.push_back(cur);
        cur.clear();
      }
    } else {
      cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
    }
  }
  if (!cur.empty()) words.push_back(cur);
  return words;
}

// Word-level vocabulary with four forced specials. "none" is a first-class
// token so edit targets always map to a single id.
struct Vocabulary {
  static constexpr const char* kBos = "<bos>";
  static constexpr const char* kEos = "<eos>";
  static constexpr const char* kUnk = "<unk>";
  static constexpr const char* kNone = "none";

  std::vector<std::string> tokens;
  std::unordered_map<std::string, int> id_of;
  int bos = -1;
  int eos = -1;
  int unk = -1;
  int none = -1;

  int size() const { return static_cast<int>(tokens.size()); }

  int lookup(const std::string& word) const {
    auto it = id_of.find(word);
    return it == id_of.end() ? unk : it->second;
  }

  const std::string& token(int id) const { return tokens.at(static_cast<std::size_t>(id)); }

  // Specials first, then corpus words sorted lexicographically so the mapping
  // is independent of text order.
  static Vocabulary build(const std::vector<std::string>& texts) {
    std::set<std::string> words;
    for (const auto& t : texts) {
      for (auto& w : normalize_words(t)) words.insert(w);
    }
    words.erase(kBos);
    words.erase(kEos);
    words.erase(kUnk);
    words.erase(kNone);

    Vocabulary v;
    auto add = [&v](const std::string& w) {
      v.id_of.emplace(w, static_cast<int>(v.tokens.size()));
      v.tokens.push_back(w);
    };
    add(kBos);
    add(kEos);
    add(kUnk);
    add(kNone);
    v.bos = 0;
    v.eos = 1;
    v.unk = 2;
    v.none = 3;
    for (const auto& w : words) add(w);
    return v;
  }
};

struct TokenSequence {
  std::vector<int> ids;

  int length() const { return static_cast<int>(ids.size()); }
};

// BOS is prepended; out-of-vocabulary words map to UNK. No EOS is appended —
// training corpus preparation does that explicitly.
inline TokenSequence tokenize(const std::string& text, const Vocabulary& vocab) {
  auto words = normalize_words(text);
  if (words.empty()) throw EmptyInput();
  TokenSequence seq;
  seq.ids.reserve(words.size() + 1);
  seq.ids.push_back(vocab.bos);
  for (const auto& w : words) seq.ids.push_back(vocab.lookup(w));
  return seq;
}

inline std::string detokenize(const TokenSequence& seq, const Vocabulary& vocab) {
  std::string out;
  for (int id : seq.ids) {
    if (id == vocab.bos || id == vocab.eos) continue;
    if (!out.empty()) out.push_back(' ');
    out += vocab.token(id);
  }
  return out;
}

}  // namespace debias
