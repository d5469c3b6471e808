#pragma once

// Word-level rationales mapped onto subtoken positions, rationale masking for
// the masked-rationale objective, and phrase extraction.

#include <cmath>
#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "offlang/corpus.hpp"
#include "offlang/errors.hpp"
#include "offlang/rng.hpp"
#include "offlang/tokenizer.hpp"

namespace offlang {

struct TokenRationales {
  std::vector<int> labels;  // one per subtoken
  std::set<std::size_t> special_positions;

  std::size_t n_nonspecial() const { return labels.size() - special_positions.size(); }
};

struct MaskedRationales {
  std::vector<int> labels;
  std::set<std::size_t> special_positions;
  std::set<std::size_t> mask_positions;

  bool zeroed(std::size_t i) const { return mask_positions.count(i) || special_positions.count(i); }

  // Every position hidden: the rationale channel is identically zero.
  static MaskedRationales fully_masked(const TokenAlignment& al) {
    MaskedRationales m;
    m.labels.assign(al.n_tokens, 0);
    m.special_positions = al.special_positions;
    for (std::size_t i = 0; i < al.n_tokens; ++i)
      if (!al.is_special(i)) m.mask_positions.insert(i);
    return m;
  }
};

// Copies each word's label onto every subtoken of its span. Special positions
// and words without rationales receive 0.
inline TokenRationales align_rationales(const Sample& sample, const TokenAlignment& alignment) {
  if (alignment.word_spans.size() != sample.tokens.size())
    throw ValidationError("sample '" + sample.id + "': alignment has " + std::to_string(alignment.word_spans.size()) +
                          " words, sample has " + std::to_string(sample.tokens.size()));
  if (!sample.rationales.empty() && sample.rationales.size() != sample.tokens.size())
    throw ValidationError("sample '" + sample.id + "': rationale length does not match token count");
  TokenRationales tr;
  tr.labels.assign(alignment.n_tokens, 0);
  tr.special_positions = alignment.special_positions;
  if (sample.rationales.empty()) return tr;
  for (std::size_t w = 0; w < alignment.word_spans.size(); ++w) {
    const auto [start, end] = alignment.word_spans[w];
    for (std::size_t i = start; i < end; ++i)
      if (!alignment.is_special(i)) tr.labels[i] = sample.rationales[w];
  }
  return tr;
}

// Selects exactly floor(ratio * n_nonspecial) non-special positions, uniformly
// without replacement (partial Fisher-Yates over the candidate list).
inline MaskedRationales mask_rationales(const TokenRationales& tr, double ratio, Rng& rng) {
  if (!(ratio >= 0.0 && ratio <= 1.0)) throw ConfigError("mask ratio must lie in [0, 1]");
  MaskedRationales m{tr.labels, tr.special_positions, {}};
  std::vector<std::size_t> candidates;
  for (std::size_t i = 0; i < tr.labels.size(); ++i)
    if (!tr.special_positions.count(i)) candidates.push_back(i);
  const auto k = static_cast<std::size_t>(std::floor(ratio * static_cast<double>(candidates.size())));
  for (std::size_t j = 0; j < k; ++j) {
    const auto pick = j + static_cast<std::size_t>(rng.below(candidates.size() - j));
    std::swap(candidates[j], candidates[pick]);
    m.mask_positions.insert(candidates[j]);
  }
  return m;
}

// Stream for one sample's mask in one epoch.
inline Rng mask_rng(std::uint64_t global_seed, std::uint64_t epoch, const std::string& sample_id) {
  return Rng(derive_seed(global_seed, {tag("rationale-mask"), epoch, fnv1a(sample_id)}));
}

// Maximal runs of rationale-1 words, each joined by single spaces.
inline std::vector<std::string> extract_phrases(const Sample& sample) {
  std::vector<std::string> phrases;
  if (sample.rationales.empty()) return phrases;
  std::string current;
  bool open = false;
  for (std::size_t i = 0; i < sample.tokens.size() && i < sample.rationales.size(); ++i) {
    if (sample.rationales[i] == 1) {
      if (open) current += ' ';
      current += sample.tokens[i];
      open = true;
    } else if (open) {
      phrases.push_back(std::move(current));
      current.clear();
      open = false;
    }
  }
  if (open) phrases.push_back(std::move(current));
  return phrases;
}

}  // namespace offlang
