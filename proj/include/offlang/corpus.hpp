#pragma once

// Rationale-annotated corpora: record parsing, loading, the train/validation
// split and class counts.
//
// Records are line-delimited. JSONL lines carry the keys id, text, tokens,
// label and rationales. TSV lines carry the same fields as tab-separated
// columns in that order, with arrays written as bracketed comma-separated
// lists ("[a,b]", "[0,1]"). Tokens are whitespace-separated words of text and
// are derived when the tokens field is missing or empty.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "offlang/errors.hpp"
#include "offlang/rng.hpp"

namespace offlang {

enum class Label { OFF = 0, NOT = 1 };

inline constexpr std::string_view label_name(Label l) { return l == Label::OFF ? "OFF" : "NOT"; }

inline std::optional<Label> parse_label(std::string_view s) {
  if (s == "OFF") return Label::OFF;
  if (s == "NOT") return Label::NOT;
  return std::nullopt;
}

enum class RecordFormat { jsonl, tsv };

enum class SplitTag { train, val, test, unsplit };

inline std::string_view split_tag_name(SplitTag t) {
  switch (t) {
    case SplitTag::train: return "train";
    case SplitTag::val: return "val";
    case SplitTag::test: return "test";
    case SplitTag::unsplit: return "unsplit";
  }
  return "unsplit";
}

struct Sample {
  std::string id;
  std::string text;
  std::vector<std::string> tokens;
  Label label = Label::NOT;
  std::vector<int> rationales;  // empty, or one 0/1 value per token

  bool operator==(const Sample&) const = default;

  bool has_rationale() const {
    for (int r : rationales)
      if (r == 1) return true;
    return false;
  }
};

struct Corpus {
  std::vector<Sample> samples;
  std::string name;
  SplitTag split_tag = SplitTag::unsplit;

  std::size_t size() const { return samples.size(); }
  bool empty() const { return samples.empty(); }
};

inline std::vector<std::string> whitespace_split(std::string_view text) {
  std::vector<std::string> out;
  std::size_t i = 0;
  auto is_space = [](char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f'; };
  while (i < text.size()) {
    while (i < text.size() && is_space(text[i])) ++i;
    std::size_t j = i;
    while (j < text.size() && !is_space(text[j])) ++j;
    if (j > i) out.emplace_back(text.substr(i, j - i));
    i = j;
  }
  return out;
}

// Throws ValidationError naming the sample id when an invariant is violated.
inline void validate_sample(const Sample& s) {
  if (s.id.empty()) throw ValidationError("sample has an empty id");
  if (!s.rationales.empty() && s.rationales.size() != s.tokens.size())
    throw ValidationError("sample '" + s.id + "': " + std::to_string(s.rationales.size()) +
                          " rationale values for " + std::to_string(s.tokens.size()) + " tokens");
  for (int r : s.rationales)
    if (r != 0 && r != 1)
      throw ValidationError("sample '" + s.id + "': rationale value " + std::to_string(r) + " is not 0 or 1");
}

namespace detail {

inline std::vector<std::string> split_bracket_list(std::string_view field, std::size_t line_no, const char* what) {
  auto trim = [](std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\r')) s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\r')) s.remove_suffix(1);
    return s;
  };
  field = trim(field);
  if (field.empty()) return {};
  if (field.size() < 2 || field.front() != '[' || field.back() != ']')
    throw ParseError(line_no, std::string(what) + " column is not a bracketed list");
  field = field.substr(1, field.size() - 2);
  std::vector<std::string> out;
  if (trim(field).empty()) return out;
  std::size_t start = 0;
  while (true) {
    const auto comma = field.find(',', start);
    out.emplace_back(trim(field.substr(start, comma - start)));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

inline int parse_flag(std::string_view s, std::size_t line_no) {
  if (s == "0") return 0;
  if (s == "1") return 1;
  // Out-of-range integers are reported by validation, not parsing.
  try {
    std::size_t used = 0;
    const int v = std::stoi(std::string(s), &used);
    if (used == s.size()) return v;
  } catch (const std::exception&) {
  }
  throw ParseError(line_no, "rationale value '" + std::string(s) + "' is not an integer");
}

}  // namespace detail

inline Sample parse_record(std::string_view line, RecordFormat format, std::size_t line_no = 0) {
  Sample s;
  if (format == RecordFormat::jsonl) {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(line_no, std::string("invalid JSON: ") + e.what());
    }
    if (!j.is_object()) throw ParseError(line_no, "record is not a JSON object");
    try {
      const auto& id = j.at("id");
      s.id = id.is_string() ? id.get<std::string>() : id.dump();
      s.text = j.at("text").get<std::string>();
      const auto label = parse_label(j.at("label").get<std::string>());
      if (!label) throw ParseError(line_no, "label must be \"OFF\" or \"NOT\"");
      s.label = *label;
      if (j.contains("tokens") && !j["tokens"].is_null()) s.tokens = j["tokens"].get<std::vector<std::string>>();
      if (j.contains("rationales") && !j["rationales"].is_null())
        s.rationales = j["rationales"].get<std::vector<int>>();
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(line_no, std::string("bad field: ") + e.what());
    }
  } else {
    std::vector<std::string_view> cols;
    std::size_t start = 0;
    while (true) {
      const auto tab = line.find('\t', start);
      cols.push_back(line.substr(start, tab - start));
      if (tab == std::string_view::npos) break;
      start = tab + 1;
    }
    if (cols.size() != 5)
      throw ParseError(line_no, "expected 5 tab-separated columns, found " + std::to_string(cols.size()));
    s.id = std::string(cols[0]);
    s.text = std::string(cols[1]);
    s.tokens = detail::split_bracket_list(cols[2], line_no, "tokens");
    std::string_view label_col = cols[3];
    const auto label = parse_label(label_col);
    if (!label) throw ParseError(line_no, "label must be OFF or NOT, got '" + std::string(label_col) + "'");
    s.label = *label;
    for (const auto& v : detail::split_bracket_list(cols[4], line_no, "rationales"))
      s.rationales.push_back(detail::parse_flag(v, line_no));
  }
  if (s.tokens.empty()) s.tokens = whitespace_split(s.text);
  validate_sample(s);
  return s;
}

inline std::string format_record(const Sample& s, RecordFormat format) {
  if (format == RecordFormat::jsonl) {
    nlohmann::ordered_json j;
    j["id"] = s.id;
    j["text"] = s.text;
    j["tokens"] = s.tokens;
    j["label"] = label_name(s.label);
    j["rationales"] = s.rationales;
    return j.dump();
  }
  std::string out = s.id + "\t" + s.text + "\t[";
  for (std::size_t i = 0; i < s.tokens.size(); ++i) out += (i ? "," : "") + s.tokens[i];
  out += "]\t" + std::string(label_name(s.label)) + "\t[";
  for (std::size_t i = 0; i < s.rationales.size(); ++i) out += (i ? "," : "") + std::to_string(s.rationales[i]);
  return out + "]";
}

inline RecordFormat format_for_path(const std::string& path) {
  return path.size() >= 4 && path.compare(path.size() - 4, 4, ".tsv") == 0 ? RecordFormat::tsv
                                                                             : RecordFormat::jsonl;
}

struct ValidationSummary {
  std::size_t n_records = 0;
  std::size_t n_not_with_rationales = 0;
  std::vector<std::string> warnings;
};

struct LoadedCorpus {
  Corpus corpus;
  ValidationSummary summary;
};

inline LoadedCorpus load_corpus(const std::string& path, RecordFormat format, SplitTag tag = SplitTag::unsplit) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read corpus file '" + path + "'");
  LoadedCorpus out;
  out.corpus.name = path;
  out.corpus.split_tag = tag;
  std::vector<std::string> failures;
  std::set<std::string> ids;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    if (format == RecordFormat::tsv && line_no == 1 && line.rfind("id\ttext\t", 0) == 0) continue;
    try {
      Sample s = parse_record(line, format, line_no);
      if (!ids.insert(s.id).second) {
        failures.push_back("line " + std::to_string(line_no) + ": duplicate id '" + s.id + "'");
        continue;
      }
      if (s.label == Label::NOT && s.has_rationale()) ++out.summary.n_not_with_rationales;
      out.corpus.samples.push_back(std::move(s));
    } catch (const ParseError& e) {
      failures.push_back(e.what());
    } catch (const ValidationError& e) {
      failures.push_back("line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  if (!failures.empty()) {
    std::string msg = std::to_string(failures.size()) + " invalid record(s) in '" + path + "':";
    for (const auto& f : failures) msg += "\n  " + f;
    throw ValidationError(msg);
  }
  out.summary.n_records = out.corpus.size();
  if (out.corpus.empty()) out.summary.warnings.push_back("corpus '" + path + "' contains no records");
  if (out.summary.n_not_with_rationales > 0)
    out.summary.warnings.push_back(std::to_string(out.summary.n_not_with_rationales) +
                                   " NOT sample(s) carry rationale labels");
  return out;
}

inline void save_corpus(const Corpus& corpus, const std::string& path, RecordFormat format) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write corpus file '" + path + "'");
  for (const auto& s : corpus.samples) out << format_record(s, format) << '\n';
}

// Deterministic shuffle-and-cut. The first part receives round(ratio * n)
// samples (per label when stratified). The shuffle stream is derived from
// seed alone.
inline std::pair<Corpus, Corpus> split_train_val(const Corpus& corpus, double ratio, std::uint64_t seed,
                                                 bool stratified = false) {
  if (!(ratio > 0.0 && ratio < 1.0)) throw ConfigError("split ratio must lie strictly between 0 and 1");
  Rng rng(derive_seed(seed, {tag("train-val-split")}));
  std::vector<std::size_t> first, second;
  auto cut = [&](std::vector<std::size_t> idx) {
    rng.shuffle(idx);
    const auto k = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(idx.size())));
    first.insert(first.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k));
    second.insert(second.end(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end());
  };
  if (stratified) {
    std::vector<std::size_t> off, nots;
    for (std::size_t i = 0; i < corpus.size(); ++i)
      (corpus.samples[i].label == Label::OFF ? off : nots).push_back(i);
    cut(std::move(off));
    cut(std::move(nots));
  } else {
    std::vector<std::size_t> idx(corpus.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    cut(std::move(idx));
  }
  Corpus a{{}, corpus.name + ":train", SplitTag::train};
  Corpus b{{}, corpus.name + ":val", SplitTag::val};
  for (auto i : first) a.samples.push_back(corpus.samples[i]);
  for (auto i : second) b.samples.push_back(corpus.samples[i]);
  return {std::move(a), std::move(b)};
}

struct SplitCounts {
  std::string name;
  SplitTag split_tag = SplitTag::unsplit;
  std::size_t n_total = 0;
  std::size_t n_off = 0;
  std::size_t n_not = 0;
};

struct DistributionReport {
  std::size_t n_total = 0;
  std::size_t n_off = 0;
  std::size_t n_not = 0;
  std::vector<SplitCounts> per_split;
};

inline DistributionReport class_distribution(const std::vector<const Corpus*>& corpora) {
  DistributionReport r;
  for (const Corpus* c : corpora) {
    SplitCounts sc{c->name, c->split_tag, c->size(), 0, 0};
    for (const auto& s : c->samples) (s.label == Label::OFF ? sc.n_off : sc.n_not)++;
    r.n_total += sc.n_total;
    r.n_off += sc.n_off;
    r.n_not += sc.n_not;
    r.per_split.push_back(std::move(sc));
  }
  return r;
}

inline DistributionReport class_distribution(const Corpus& c) { return class_distribution({&c}); }

inline nlohmann::ordered_json to_json(const DistributionReport& r) {
  nlohmann::ordered_json j;
  j["n_total"] = r.n_total;
  j["n_off"] = r.n_off;
  j["n_not"] = r.n_not;
  j["per_split"] = nlohmann::ordered_json::array();
  for (const auto& s : r.per_split)
    j["per_split"].push_back({{"name", s.name},
                              {"split", split_tag_name(s.split_tag)},
                              {"n_total", s.n_total},
                              {"n_off", s.n_off},
                              {"n_not", s.n_not}});
  return j;
}

inline std::string render_distribution(const DistributionReport& r) {
  std::ostringstream os;
  auto pct = [](std::size_t k, std::size_t n) { return n ? 100.0 * static_cast<double>(k) / static_cast<double>(n) : 0.0; };
  char buf[256];
  os << "split        total      OFF      NOT   OFF%\n";
  for (const auto& s : r.per_split) {
    std::snprintf(buf, sizeof buf, "%-8s %9zu %8zu %8zu %6.2f\n", std::string(split_tag_name(s.split_tag)).c_str(),
                  s.n_total, s.n_off, s.n_not, pct(s.n_off, s.n_total));
    os << buf;
  }
  std::snprintf(buf, sizeof buf, "%-8s %9zu %8zu %8zu %6.2f\n", "all", r.n_total, r.n_off, r.n_not,
                pct(r.n_off, r.n_total));
  os << buf;
  return os.str();
}

}  // namespace offlang
