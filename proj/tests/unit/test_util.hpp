#pragma once

#include <atomic>
#include <filesystem>
#include <string>
#include <unistd.h>

#include "offlang/corpus.hpp"
#include "offlang/encoder.hpp"
#include "offlang/synthetic.hpp"

namespace offlang::test {

inline std::string fixture(const std::string& name) { return std::string(OFFLANG_FIXTURES) + "/" + name; }

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("offlang-test-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::string file(const std::string& name) const { return (path_ / name).string(); }

 private:
  std::filesystem::path path_;
};

inline Sample make_sample(std::string id, std::vector<std::string> tokens, Label label, std::vector<int> rationales = {}) {
  Sample s;
  s.id = std::move(id);
  s.tokens = std::move(tokens);
  for (std::size_t i = 0; i < s.tokens.size(); ++i) s.text += (i ? " " : "") + s.tokens[i];
  s.label = label;
  s.rationales = std::move(rationales);
  return s;
}

inline EncoderConfig tiny_encoder(std::size_t vocab = 0) {
  EncoderConfig c;
  c.n_layers = 1;
  c.hidden_size = 8;
  c.n_heads = 2;
  c.ff_size = 16;
  c.max_seq_len = 16;
  c.vocab_size = vocab;
  c.dropout = 0.0;
  return c;
}

inline Corpus small_synthetic(std::size_t n, std::uint64_t seed = 7) {
  SyntheticOptions o;
  o.n_samples = n;
  return make_synthetic_corpus(o, seed);
}

}  // namespace offlang::test
