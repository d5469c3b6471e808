#pragma once

// Synthetic rationale-annotated corpora for desk-scale runs.
//
// A sample is OFF exactly when it contains at least one trigger word, and its
// rationales mark exactly the trigger words. Texts mix frequent filler words,
// a leading @USER mention on some samples and occasional rare words that the
// vocabulary splits into several pieces.

#include <cstdint>
#include <string>
#include <vector>

#include "offlang/corpus.hpp"
#include "offlang/rng.hpp"

namespace offlang {

struct SyntheticOptions {
  std::size_t n_samples = 512;
  double off_fraction = 0.42;
  std::size_t min_words = 5;
  std::size_t max_words = 12;
  std::size_t n_filler = 60;
  std::size_t n_triggers = 8;
  double rare_word_prob = 0.08;
  double mention_prob = 0.5;
};

inline std::string synthetic_word(Rng& rng, std::size_t syllables) {
  static const char* onsets[] = {"k", "g", "t", "d", "p", "b", "m", "n", "s", "h", "l", "r", "v", "y"};
  static const char* vowels[] = {"a", "e", "i", "o", "u", "aa", "ee"};
  std::string w;
  for (std::size_t s = 0; s < syllables; ++s) {
    w += onsets[rng.below(std::size(onsets))];
    w += vowels[rng.below(std::size(vowels))];
  }
  return w;
}

inline Corpus make_synthetic_corpus(const SyntheticOptions& opts, std::uint64_t seed, const std::string& name = "synthetic") {
  Rng lex(derive_seed(seed, {tag("synthetic-lexicon")}));
  std::vector<std::string> filler, triggers;
  auto fresh = [&](std::vector<std::string>& into, std::size_t syl, const std::string& prefix) {
    while (true) {
      std::string w = prefix + synthetic_word(lex, syl);
      bool dup = false;
      for (const auto& v : filler) dup = dup || v == w;
      for (const auto& v : triggers) dup = dup || v == w;
      if (!dup) {
        into.push_back(std::move(w));
        return;
      }
    }
  };
  for (std::size_t i = 0; i < opts.n_filler; ++i) fresh(filler, 2, "");
  for (std::size_t i = 0; i < opts.n_triggers; ++i) fresh(triggers, 2, "x");

  Rng rng(derive_seed(seed, {tag("synthetic-samples")}));
  Corpus c;
  c.name = name;
  for (std::size_t i = 0; i < opts.n_samples; ++i) {
    Sample s;
    s.id = name + "-" + std::to_string(i);
    const bool off = rng.uniform() < opts.off_fraction;
    const std::size_t n = opts.min_words + rng.below(opts.max_words - opts.min_words + 1);
    std::vector<int> marks;
    if (rng.uniform() < opts.mention_prob) {
      s.tokens.push_back("@USER");
      marks.push_back(0);
    }
    while (s.tokens.size() < n) {
      if (rng.uniform() < opts.rare_word_prob) s.tokens.push_back("q" + synthetic_word(rng, 3));
      else s.tokens.push_back(filler[rng.below(filler.size())]);
      marks.push_back(0);
    }
    if (off) {
      // One trigger, sometimes a second one right after it.
      const std::size_t pos = rng.below(s.tokens.size());
      s.tokens[pos] = triggers[rng.below(triggers.size())];
      marks[pos] = 1;
      if (pos + 1 < s.tokens.size() && rng.bernoulli(0.3)) {
        s.tokens[pos + 1] = triggers[rng.below(triggers.size())];
        marks[pos + 1] = 1;
      }
    }
    s.label = off ? Label::OFF : Label::NOT;
    if (off) s.rationales = std::move(marks);
    for (std::size_t k = 0; k < s.tokens.size(); ++k) s.text += (k ? " " : "") + s.tokens[k];
    c.samples.push_back(std::move(s));
  }
  return c;
}

}  // namespace offlang
