#pragma once

// Word-piece vocabulary over whitespace words.
//
// A word found whole in the vocabulary becomes one subtoken. Otherwise it is
// split greedily into the longest known prefixes, with continuation pieces
// spelled "##piece"; a word that cannot be covered becomes a single [UNK].
// Encoded sequences are framed as [CLS] w... [SEP] and may be right-padded
// with [PAD].

#include <algorithm>
#include <cstddef>
#include <map>
#include <set>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "offlang/corpus.hpp"
#include "offlang/errors.hpp"

namespace offlang {

// Splits a UTF-8 string into code point substrings. Invalid lead bytes are
// taken as single bytes.
inline std::vector<std::string> utf8_chars(std::string_view s) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < s.size()) {
    const auto c = static_cast<unsigned char>(s[i]);
    std::size_t len = 1;
    if (c >= 0xF0) len = 4;
    else if (c >= 0xE0) len = 3;
    else if (c >= 0xC0) len = 2;
    len = std::min(len, s.size() - i);
    out.emplace_back(s.substr(i, len));
    i += len;
  }
  return out;
}

// Subtoken layout of one encoded sequence. word_spans are half-open
// [start, end) ranges; words cut off by truncation get an empty span.
struct TokenAlignment {
  std::vector<std::pair<std::size_t, std::size_t>> word_spans;
  std::size_t n_tokens = 0;
  std::set<std::size_t> special_positions;

  bool is_special(std::size_t i) const { return special_positions.count(i) != 0; }
  std::size_t n_nonspecial() const { return n_tokens - special_positions.size(); }
};

struct Encoding {
  std::vector<int> ids;
  TokenAlignment alignment;
};

struct TokenizerOptions {
  std::size_t min_count = 2;     // words rarer than this are split into pieces
  std::size_t max_words = 50000;
};

class Tokenizer {
 public:
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;
  static constexpr int kCls = 2;
  static constexpr int kSep = 3;
  static constexpr int kMask = 4;
  static constexpr int kFirstRegular = 5;

  Tokenizer() {
    for (const char* s : {"[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"}) push(s);
  }

  explicit Tokenizer(std::vector<std::string> pieces) {
    for (auto& p : pieces) {
      if (index_.count(p)) throw ValidationError("duplicate vocabulary entry '" + p + "'");
      push(std::move(p));
    }
    if (pieces_.size() < kFirstRegular || pieces_[kPad] != "[PAD]" || pieces_[kUnk] != "[UNK]" ||
        pieces_[kCls] != "[CLS]" || pieces_[kSep] != "[SEP]" || pieces_[kMask] != "[MASK]")
      throw ValidationError("vocabulary does not start with the reserved entries");
  }

  // Words in `exclude` are left out so they can be registered later.
  static Tokenizer build(const Corpus& corpus, const TokenizerOptions& opts = {},
                         const std::vector<std::string>& exclude = {}) {
    std::map<std::string, std::size_t> counts;
    std::set<std::string> chars;
    const std::set<std::string> skip(exclude.begin(), exclude.end());
    for (const auto& s : corpus.samples)
      for (const auto& w : s.tokens) {
        if (skip.count(w)) continue;
        ++counts[w];
        for (auto& c : utf8_chars(w)) chars.insert(std::move(c));
      }
    Tokenizer t;
    for (const auto& c : chars) t.push(c);
    for (const auto& c : chars) t.push("##" + c);
    std::vector<std::pair<std::string, std::size_t>> words(counts.begin(), counts.end());
    std::stable_sort(words.begin(), words.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
    std::size_t added = 0;
    for (const auto& [w, n] : words) {
      if (n < opts.min_count || added >= opts.max_words) break;
      if (!t.index_.count(w)) {
        t.push(w);
        ++added;
      }
    }
    return t;
  }

  std::size_t size() const { return pieces_.size(); }
  const std::vector<std::string>& pieces() const { return pieces_; }
  const std::string& piece(int id) const { return pieces_.at(static_cast<std::size_t>(id)); }
  bool contains(const std::string& p) const { return index_.count(p) != 0; }
  int id_of(const std::string& p) const {
    auto it = index_.find(p);
    return it == index_.end() ? kUnk : it->second;
  }

  int add(const std::string& p) {
    if (contains(p)) throw ValidationError("token '" + p + "' is already in the vocabulary");
    push(p);
    return static_cast<int>(pieces_.size() - 1);
  }

  std::vector<int> tokenize_word(const std::string& word) const {
    if (auto it = index_.find(word); it != index_.end()) return {it->second};
    const auto chars = utf8_chars(word);
    std::vector<int> out;
    std::size_t start = 0;
    while (start < chars.size()) {
      int found = -1;
      std::size_t end = chars.size();
      for (; end > start; --end) {
        std::string cand = start ? "##" : "";
        for (std::size_t k = start; k < end; ++k) cand += chars[k];
        if (auto it = index_.find(cand); it != index_.end()) {
          found = it->second;
          break;
        }
      }
      if (found < 0) return {kUnk};
      out.push_back(found);
      start = end;
    }
    return out;
  }

  // max_len counts the [CLS]/[SEP] frame; pad_to > 0 right-pads with [PAD].
  Encoding encode(const std::vector<std::string>& words, std::size_t max_len, std::size_t pad_to = 0) const {
    if (max_len < 2) throw ValidationError("max_len must leave room for [CLS] and [SEP]");
    Encoding e;
    auto& al = e.alignment;
    e.ids.push_back(kCls);
    al.special_positions.insert(0);
    const std::size_t budget = max_len - 1;  // last slot reserved for [SEP]
    for (const auto& w : words) {
      const auto pieces = tokenize_word(w);
      const std::size_t start = e.ids.size();
      for (int id : pieces) {
        if (e.ids.size() >= budget) break;
        e.ids.push_back(id);
      }
      al.word_spans.emplace_back(start, e.ids.size());
    }
    al.special_positions.insert(e.ids.size());
    e.ids.push_back(kSep);
    while (e.ids.size() < pad_to) {
      al.special_positions.insert(e.ids.size());
      e.ids.push_back(kPad);
    }
    al.n_tokens = e.ids.size();
    return e;
  }

 private:
  void push(std::string p) {
    index_.emplace(p, static_cast<int>(pieces_.size()));
    pieces_.push_back(std::move(p));
  }

  std::vector<std::string> pieces_;
  std::unordered_map<std::string, int> index_;
};

}  // namespace offlang
