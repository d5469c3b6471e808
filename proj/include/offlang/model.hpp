#pragma once

// A model bundles the vocabulary, the encoder shape and its weights, plus
// checkpoint interchange.
//
// Checkpoint directory layout:
//
//   manifest.json  stage, epoch, selection metric, config hash, timestamp,
//                  encoder config, adapter config, stage config, vocabulary
//   weights.bin    named float64 arrays
//
// weights.bin is little-endian:
//
//   char[4] "OFLW" | u32 version (1) | u32 array count
//   per array: u32 name length | name bytes | u64 rows | u64 cols |
//              u8 trainable | rows*cols f64 values, row-major

#include <bit>
#include <chrono>
#include <cstdint>
#include <cstdlib>
#include <cstring>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "offlang/corpus.hpp"
#include "offlang/encoder.hpp"
#include "offlang/errors.hpp"
#include "offlang/rationale.hpp"
#include "offlang/rng.hpp"
#include "offlang/tokenizer.hpp"

namespace offlang {

inline const std::vector<std::string>& default_special_tokens() {
  static const std::vector<std::string> tokens = {"@USER", "<URL>"};
  return tokens;
}

struct Model {
  Tokenizer tokenizer;
  EncoderConfig config;
  ParameterSet params;
  std::optional<LoraConfig> lora;

  Encoding encode(const Sample& s, std::size_t pad_to = 0) const {
    return tokenizer.encode(s.tokens, config.max_seq_len, pad_to);
  }
};

// Vocabulary from the training corpus, seeded initialization, then the
// special tokens appended through register_special_tokens.
inline Model make_base_model(const Corpus& train, EncoderConfig cfg, std::uint64_t seed,
                             const TokenizerOptions& topts = {},
                             const std::vector<std::string>& special_tokens = default_special_tokens()) {
  Model m;
  m.tokenizer = Tokenizer::build(train, topts, special_tokens);
  cfg.vocab_size = m.tokenizer.size();
  m.params = init_parameters(cfg, seed);
  Rng rng(derive_seed(seed, {tag("special-tokens")}));
  register_special_tokens(m.params, m.tokenizer, special_tokens, rng);
  cfg.vocab_size = m.tokenizer.size();
  m.config = cfg;
  return m;
}

// Architecture equality, ignoring regularization settings.
inline bool same_architecture(const EncoderConfig& a, const EncoderConfig& b) {
  return a.n_layers == b.n_layers && a.hidden_size == b.hidden_size && a.n_heads == b.n_heads &&
         a.ff_size == b.ff_size && a.vocab_size == b.vocab_size && a.max_seq_len == b.max_seq_len &&
         a.n_rationale_classes == b.n_rationale_classes;
}

struct CheckpointManifest {
  std::string stage;  // "stage1" or "stage2"
  std::string config_hash;
  std::size_t epoch = 0;
  std::string metric_name;  // "val_loss" or "val_macro_f1"
  double metric_value = 0.0;
  std::string timestamp;
  nlohmann::json stage_config;
  std::string path;  // directory it was written to, when saved
};

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline std::string config_hash(const nlohmann::json& j) { return hex64(fnv1a(j.dump())); }

inline std::string checkpoint_config_hash(const Model& m, const nlohmann::json& stage_config) {
  nlohmann::json j;
  j["encoder"] = m.config;
  j["lora"] = m.lora ? nlohmann::json(*m.lora) : nlohmann::json(nullptr);
  j["stage_config"] = stage_config;
  return config_hash(j);
}

// UTC, from SOURCE_DATE_EPOCH when set.
inline std::string utc_timestamp() {
  std::time_t t = std::time(nullptr);
  if (const char* sde = std::getenv("SOURCE_DATE_EPOCH")) t = static_cast<std::time_t>(std::strtoll(sde, nullptr, 10));
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

inline nlohmann::ordered_json to_json(const CheckpointManifest& m) {
  nlohmann::ordered_json j;
  j["stage"] = m.stage;
  j["config_hash"] = m.config_hash;
  j["epoch"] = m.epoch;
  j["metric_name"] = m.metric_name;
  j["metric_value"] = m.metric_value;
  j["timestamp"] = m.timestamp;
  j["stage_config"] = m.stage_config;
  return j;
}

namespace detail {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

template <typename T>
void write_pod(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T read_pod(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!is) throw Error("truncated weights file");
  return v;
}

struct NamedArray {
  Mat value;
  bool trainable = true;
};

inline std::map<std::string, NamedArray> read_weights(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw Error("cannot read '" + file.string() + "'");
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "OFLW", 4) != 0) throw Error("'" + file.string() + "' is not a weights file");
  if (read_pod<std::uint32_t>(in) != 1) throw Error("unsupported weights version");
  const auto count = read_pod<std::uint32_t>(in);
  std::map<std::string, NamedArray> out;
  for (std::uint32_t k = 0; k < count; ++k) {
    const auto len = read_pod<std::uint32_t>(in);
    std::string name(len, '\0');
    in.read(name.data(), len);
    const auto rows = read_pod<std::uint64_t>(in);
    const auto cols = read_pod<std::uint64_t>(in);
    NamedArray a;
    a.trainable = read_pod<std::uint8_t>(in) != 0;
    a.value.resize(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    in.read(reinterpret_cast<char*>(a.value.data()), static_cast<std::streamsize>(rows * cols * sizeof(double)));
    if (!in) throw Error("truncated weights file '" + file.string() + "'");
    out.emplace(std::move(name), std::move(a));
  }
  return out;
}

}  // namespace detail

inline void save_weights(const ParameterSet& ps, const std::filesystem::path& file) {
  std::ofstream out(file, std::ios::binary);
  if (!out) throw Error("cannot write '" + file.string() + "'");
  std::uint32_t count = 0;
  for_each_param(ps, [&](const std::string&, const Param&) { ++count; });
  out.write("OFLW", 4);
  detail::write_pod<std::uint32_t>(out, 1);
  detail::write_pod<std::uint32_t>(out, count);
  for_each_param(ps, [&](const std::string& name, const Param& p) {
    detail::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::write_pod<std::uint64_t>(out, static_cast<std::uint64_t>(p.value.rows()));
    detail::write_pod<std::uint64_t>(out, static_cast<std::uint64_t>(p.value.cols()));
    detail::write_pod<std::uint8_t>(out, p.trainable ? 1 : 0);
    out.write(reinterpret_cast<const char*>(p.value.data()), static_cast<std::streamsize>(p.value.size() * sizeof(double)));
  });
  if (!out) throw Error("failed writing '" + file.string() + "'");
}

inline void save_checkpoint(const std::filesystem::path& dir, const Model& model, CheckpointManifest manifest) {
  std::filesystem::create_directories(dir);
  manifest.config_hash = checkpoint_config_hash(model, manifest.stage_config);
  if (manifest.timestamp.empty()) manifest.timestamp = utc_timestamp();
  save_weights(model.params, dir / "weights.bin");
  nlohmann::ordered_json j = to_json(manifest);
  j["encoder"] = nlohmann::json(model.config);
  j["lora"] = model.lora ? nlohmann::json(*model.lora) : nlohmann::json(nullptr);
  j["vocabulary"] = model.tokenizer.pieces();
  j["weights"] = "weights.bin";
  std::ofstream out(dir / "manifest.json", std::ios::binary);
  if (!out) throw Error("cannot write manifest in '" + dir.string() + "'");
  out << j.dump(2) << '\n';
}

struct LoadedCheckpoint {
  Model model;
  CheckpointManifest manifest;
};

inline LoadedCheckpoint load_checkpoint(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json", std::ios::binary);
  if (!in) throw Error("no manifest.json in '" + dir.string() + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw Error("bad manifest in '" + dir.string() + "': " + e.what());
  }
  LoadedCheckpoint lc;
  auto& m = lc.manifest;
  m.stage = j.value("stage", "");
  m.config_hash = j.value("config_hash", "");
  m.epoch = j.value("epoch", std::size_t{0});
  m.metric_name = j.value("metric_name", "");
  m.metric_value = j.value("metric_value", 0.0);
  m.timestamp = j.value("timestamp", "");
  m.stage_config = j.value("stage_config", nlohmann::json::object());
  m.path = dir.string();

  Model& model = lc.model;
  model.config = j.at("encoder").get<EncoderConfig>();
  if (!j["lora"].is_null()) model.lora = j["lora"].get<LoraConfig>();
  model.tokenizer = Tokenizer(j.at("vocabulary").get<std::vector<std::string>>());
  if (model.tokenizer.size() != model.config.vocab_size)
    throw ValidationError("vocabulary size does not match the encoder config");
  if (checkpoint_config_hash(model, m.stage_config) != m.config_hash)
    throw ValidationError("config hash mismatch in '" + dir.string() + "'");

  // Build the parameter shapes, attach adapters, then overwrite every array.
  model.params = init_parameters(model.config, 0);
  if (model.lora) model.params = apply_lora(model.params, *model.lora, 0);
  auto arrays = detail::read_weights(dir / j.value("weights", std::string("weights.bin")));
  std::size_t used = 0;
  for_each_param(model.params, [&](const std::string& name, Param& p) {
    auto it = arrays.find(name);
    if (it == arrays.end()) throw ValidationError("weights file lacks '" + name + "'");
    if (it->second.value.rows() != p.value.rows() || it->second.value.cols() != p.value.cols())
      throw ValidationError("shape mismatch for '" + name + "'");
    p.value = std::move(it->second.value);
    p.trainable = it->second.trainable;
    p.grad.resize(0, 0);
    ++used;
  });
  if (used != arrays.size()) throw ValidationError("weights file has unexpected arrays");
  return lc;
}

}  // namespace offlang
