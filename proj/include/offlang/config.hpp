#pragma once

// Run configuration: one JSON document plus `--dot.path value` overrides.
//
// Defaults follow the published hyper-parameter tables (learning rate 2e-5,
// batch 16, 5 epochs, RAdam, mask ratio 0.75; LoRA r=16, alpha=16, dropout
// 0) except the encoder block, which defaults to a tiny CPU-sized shape.
// The single `seed` feeds both stages; stage blocks carry no seed of their
// own. LoRA lives in its own block and applies to stage 2 when enabled.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "offlang/ablation.hpp"
#include "offlang/encoder.hpp"
#include "offlang/errors.hpp"
#include "offlang/remote.hpp"
#include "offlang/tokenizer.hpp"
#include "offlang/training.hpp"

namespace offlang {

struct PathsConfig {
  std::string train;
  std::string val;   // empty: carve from train with split.val_ratio
  std::string test;
  std::string output_dir = "runs";
  std::string pretrained;       // base checkpoint replacing seeded initialization
  std::string init_checkpoint;  // stage-1 checkpoint for finetune
  std::string checkpoint;       // model to score in evaluate
  std::vector<std::string> reports;  // metrics JSON files for report
};

struct SplitConfig {
  double val_ratio = 0.1;
  bool stratified = false;
};

struct LoraBlock {
  bool enabled = false;
  LoraConfig adapter;
};

struct RunConfig {
  PathsConfig paths;
  EncoderConfig encoder;
  TokenizerOptions tokenizer;
  StageConfig stage1;
  StageConfig stage2;
  AblationSpec ablation;
  LoraBlock lora;
  RemoteClientConfig remote;
  SplitConfig split;
  std::uint64_t seed = 42;
  int precision = 3;
  std::size_t parallel = 1;  // concurrent ablation arms

  RunConfig() { stage2.intermediate_task = IntermediateTask::NONE; }

  // Stage blocks with the run seed and, for stage 2, the adapter settings.
  StageConfig stage1_config() const {
    StageConfig s = stage1;
    s.global_seed = seed;
    s.lora.reset();
    return s;
  }
  StageConfig stage2_config() const {
    StageConfig s = stage2;
    s.global_seed = seed;
    s.intermediate_task = IntermediateTask::NONE;
    if (lora.enabled) s.lora = lora.adapter;
    else s.lora.reset();
    return s;
  }
};

namespace detail {

inline nlohmann::json stage_block(const StageConfig& s) {
  nlohmann::json j = s;
  j.erase("global_seed");
  j.erase("lora");
  return j;
}

}  // namespace detail

inline void to_json(nlohmann::json& j, const RunConfig& c) {
  j = nlohmann::json::object();
  j["paths"] = {{"train", c.paths.train},
                {"val", c.paths.val},
                {"test", c.paths.test},
                {"output_dir", c.paths.output_dir},
                {"pretrained", c.paths.pretrained},
                {"init_checkpoint", c.paths.init_checkpoint},
                {"checkpoint", c.paths.checkpoint},
                {"reports", c.paths.reports}};
  j["encoder"] = c.encoder;
  j["tokenizer"] = {{"min_count", c.tokenizer.min_count}, {"max_words", c.tokenizer.max_words}};
  j["stage1"] = detail::stage_block(c.stage1);
  j["stage2"] = detail::stage_block(c.stage2);
  j["stage2"].erase("mask_ratio");
  j["stage2"].erase("mlm_prob");
  j["stage2"].erase("intermediate_task");
  j["ablation"] = c.ablation;
  j["lora"] = c.lora.adapter;
  j["lora"]["enabled"] = c.lora.enabled;
  j["remote"] = c.remote;
  j["split"] = {{"val_ratio", c.split.val_ratio}, {"stratified", c.split.stratified}};
  j["seed"] = c.seed;
  j["precision"] = c.precision;
  j["parallel"] = c.parallel;
}

inline const nlohmann::json& default_config_json() {
  static const nlohmann::json j = RunConfig{};
  return j;
}

// Every key path in `j` that has no counterpart in `schema`.
inline void unknown_keys(const nlohmann::json& j, const nlohmann::json& schema, const std::string& prefix,
                         std::vector<std::string>& out) {
  if (!j.is_object()) return;
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string path = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (!schema.is_object() || !schema.contains(it.key())) {
      out.push_back("unknown key '" + path + "'");
      continue;
    }
    if (schema[it.key()].is_object()) unknown_keys(it.value(), schema[it.key()], path, out);
  }
}

// Merges `patch` into `base` object-wise; non-object values replace.
inline void merge_json(nlohmann::json& base, const nlohmann::json& patch) {
  for (auto it = patch.begin(); it != patch.end(); ++it) {
    if (it.value().is_object() && base.contains(it.key()) && base[it.key()].is_object())
      merge_json(base[it.key()], it.value());
    else
      base[it.key()] = it.value();
  }
}

// Values parse as JSON when they can (numbers, booleans, arrays), else they
// are taken as strings.
inline nlohmann::json override_value(const std::string& text) {
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception&) {
    return text;
  }
}

inline void apply_override(nlohmann::json& j, const std::string& dotted, const std::string& value,
                           std::vector<std::string>& problems) {
  const nlohmann::json* schema = &default_config_json();
  nlohmann::json* node = &j;
  std::size_t start = 0;
  while (true) {
    const auto dot = dotted.find('.', start);
    const std::string key = dotted.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (key.empty() || !schema->is_object() || !schema->contains(key)) {
      problems.push_back("unknown override '--" + dotted + "'");
      return;
    }
    schema = &(*schema)[key];
    if (dot == std::string::npos) {
      (*node)[key] = override_value(value);
      return;
    }
    if (!(*node)[key].is_object()) (*node)[key] = nlohmann::json::object();
    node = &(*node)[key];
    start = dot + 1;
  }
}

namespace detail {

inline void check(bool ok, const std::string& msg, std::vector<std::string>& problems) {
  if (!ok) problems.push_back(msg);
}

inline void check_stage(const std::string& name, const StageConfig& s, std::vector<std::string>& p) {
  check(s.learning_rate > 0.0, name + ".learning_rate must be positive", p);
  check(s.epochs >= 1, name + ".epochs must be at least 1", p);
  check(s.batch_size >= 1, name + ".batch_size must be at least 1", p);
  check(s.mask_ratio >= 0.0 && s.mask_ratio <= 1.0, name + ".mask_ratio must lie in [0, 1]", p);
  check(s.mlm_prob >= 0.0 && s.mlm_prob <= 1.0, name + ".mlm_prob must lie in [0, 1]", p);
  check(s.weight_decay >= 0.0, name + ".weight_decay must be non-negative", p);
  check(s.max_grad_norm >= 0.0, name + ".max_grad_norm must be non-negative", p);
}

// Parses one block, recording a type problem instead of throwing.
template <typename T, typename F>
void parse_block(const nlohmann::json& j, const char* key, T& into, F&& convert, std::vector<std::string>& p) {
  try {
    convert(j.at(key), into);
  } catch (const std::exception& e) {
    p.push_back(std::string(key) + ": " + e.what());
  }
}

}  // namespace detail

// Builds a RunConfig from a (possibly partial) document. Every problem is
// collected before a single ConfigError is thrown.
inline RunConfig parse_run_config(const nlohmann::json& doc, bool check_paths = true,
                                  std::vector<std::string> p = {}) {
  if (!doc.is_object()) throw ConfigError("configuration must be a JSON object");
  unknown_keys(doc, default_config_json(), "", p);
  nlohmann::json j = default_config_json();
  merge_json(j, doc);

  RunConfig c;
  detail::parse_block(j, "paths", c.paths, [](const nlohmann::json& b, PathsConfig& x) {
    x.train = b.at("train").get<std::string>();
    x.val = b.at("val").get<std::string>();
    x.test = b.at("test").get<std::string>();
    x.output_dir = b.at("output_dir").get<std::string>();
    x.pretrained = b.at("pretrained").get<std::string>();
    x.init_checkpoint = b.at("init_checkpoint").get<std::string>();
    x.checkpoint = b.at("checkpoint").get<std::string>();
    x.reports = b.at("reports").get<std::vector<std::string>>();
  }, p);
  detail::parse_block(j, "encoder", c.encoder, [](const nlohmann::json& b, EncoderConfig& x) { x = b.get<EncoderConfig>(); }, p);
  detail::parse_block(j, "tokenizer", c.tokenizer, [](const nlohmann::json& b, TokenizerOptions& x) {
    x.min_count = b.at("min_count").get<std::size_t>();
    x.max_words = b.at("max_words").get<std::size_t>();
  }, p);
  detail::parse_block(j, "stage1", c.stage1, [](const nlohmann::json& b, StageConfig& x) { x = b.get<StageConfig>(); }, p);
  detail::parse_block(j, "stage2", c.stage2, [](const nlohmann::json& b, StageConfig& x) {
    x = b.get<StageConfig>();
    x.intermediate_task = IntermediateTask::NONE;
  }, p);
  detail::parse_block(j, "ablation", c.ablation, [](const nlohmann::json& b, AblationSpec& x) { x = b.get<AblationSpec>(); }, p);
  detail::parse_block(j, "lora", c.lora, [](const nlohmann::json& b, LoraBlock& x) {
    x.adapter = b.get<LoraConfig>();
    x.enabled = b.at("enabled").get<bool>();
  }, p);
  detail::parse_block(j, "remote", c.remote, [](const nlohmann::json& b, RemoteClientConfig& x) { x = b.get<RemoteClientConfig>(); }, p);
  detail::parse_block(j, "split", c.split, [](const nlohmann::json& b, SplitConfig& x) {
    x.val_ratio = b.at("val_ratio").get<double>();
    x.stratified = b.at("stratified").get<bool>();
  }, p);
  if (j["seed"].is_number_unsigned()) c.seed = j["seed"].get<std::uint64_t>();
  else p.push_back("seed must be a non-negative integer");
  if (j["precision"].is_number_integer()) c.precision = j["precision"].get<int>();
  else p.push_back("precision must be an integer");
  if (j["parallel"].is_number_unsigned()) c.parallel = j["parallel"].get<std::size_t>();
  else p.push_back("parallel must be a non-negative integer");

  try {
    c.encoder.validate();
  } catch (const ConfigError& e) {
    p.push_back(std::string("encoder: ") + e.what());
  }
  detail::check(c.encoder.n_layers >= 1, "encoder.n_layers must be at least 1", p);
  detail::check(c.tokenizer.min_count >= 1, "tokenizer.min_count must be at least 1", p);
  detail::check_stage("stage1", c.stage1, p);
  detail::check_stage("stage2", c.stage2, p);
  detail::check(c.stage1.intermediate_task != IntermediateTask::NONE, "stage1.intermediate_task must be MRP or MLM", p);
  for (double r : c.ablation.mrp_ratios) detail::check(r >= 0.0 && r <= 1.0, "ablation.mrp_ratios entries must lie in [0, 1]", p);
  for (double r : c.ablation.mlm_probs) detail::check(r >= 0.0 && r <= 1.0, "ablation.mlm_probs entries must lie in [0, 1]", p);
  detail::check(c.lora.adapter.rank >= 1, "lora.rank must be at least 1", p);
  detail::check(c.lora.adapter.alpha > 0.0, "lora.alpha must be positive", p);
  detail::check(c.lora.adapter.dropout >= 0.0 && c.lora.adapter.dropout < 1.0, "lora.dropout must lie in [0, 1)", p);
  static const std::vector<std::string> projections = {"query", "key", "value", "output", "gate", "up", "down"};
  for (const auto& t : c.lora.adapter.targets)
    detail::check(std::find(projections.begin(), projections.end(), detail::canonical_projection(t)) != projections.end(),
                  "lora.targets: unknown projection '" + t + "'", p);
  detail::check(c.remote.max_concurrent >= 1, "remote.max_concurrent must be at least 1", p);
  detail::check(c.remote.timeout_ms > 0, "remote.timeout_ms must be positive", p);
  detail::check(c.split.val_ratio > 0.0 && c.split.val_ratio < 1.0, "split.val_ratio must lie strictly between 0 and 1", p);
  detail::check(c.precision >= 0 && c.precision <= 8, "precision must lie in [0, 8]", p);
  detail::check(c.parallel >= 1, "parallel must be at least 1", p);

  if (check_paths) {
    auto exists = [&](const std::string& key, const std::string& path) {
      if (!path.empty() && !std::filesystem::exists(path)) p.push_back("paths." + key + ": '" + path + "' does not exist");
    };
    exists("train", c.paths.train);
    exists("val", c.paths.val);
    exists("test", c.paths.test);
    exists("pretrained", c.paths.pretrained);
    exists("init_checkpoint", c.paths.init_checkpoint);
    exists("checkpoint", c.paths.checkpoint);
    for (const auto& r : c.paths.reports) exists("reports", r);
  }

  if (!p.empty()) {
    std::string msg = std::to_string(p.size()) + " configuration problem(s):";
    for (const auto& s : p) msg += "\n  " + s;
    throw ConfigError(msg);
  }
  return c;
}

// Reads `path` (empty: defaults only), applies the overrides in order, then
// parses and validates. Override and document problems are reported together.
inline RunConfig load_run_config(const std::string& path,
                                 const std::vector<std::pair<std::string, std::string>>& overrides = {},
                                 bool check_paths = true) {
  nlohmann::json doc = nlohmann::json::object();
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file '" + path + "'");
    try {
      in >> doc;
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("config file '" + path + "' is not valid JSON: " + e.what());
    }
  }
  std::vector<std::string> problems;
  for (const auto& [k, v] : overrides) apply_override(doc, k, v, problems);
  return parse_run_config(doc, check_paths, std::move(problems));
}

}  // namespace offlang
