#pragma once

// Instruction records for offensive-language classification with phrase
// extraction, and parsing of model responses.

#include <cctype>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "offlang/corpus.hpp"
#include "offlang/rationale.hpp"

namespace offlang {

inline constexpr std::string_view kSystemPrompt =
    "You are an emotionally intelligent assistant who speaks Sinhala and English Languages. Your task is to "
    "determine whether each tweet is OFFENSIVE or NOT OFFENSIVE. For each tweet, provide a single word as your "
    "output: either \"OFF\" or \"NOT\". For offensive tweets, identify and list the specific offensive phrases "
    "without translation.\n";

inline constexpr std::string_view kUserTemplate =
    "Please classify the following tweet as \"OFF\" or \"NOT\". If offensive, list the specific offensive "
    "phrases:\n\n'[TWEET]'";

inline constexpr std::string_view kAssistantTemplate = "[LABEL]\nPhrases: [PHRASES]";

inline constexpr std::string_view kPhraseDelimiter = ", ";
inline constexpr std::string_view kNoPhrases = "None";

enum class InstructionMode { train, query };

struct PromptInstance {
  std::string system;
  std::string user;
  std::optional<std::string> assistant;
};

// Replaces the first occurrence of `slot` only, so placeholder-like text in
// the substituted value is left alone.
inline std::string fill_slot(std::string_view tpl, std::string_view slot, std::string_view value) {
  const auto at = tpl.find(slot);
  if (at == std::string_view::npos) return std::string(tpl);
  return std::string(tpl.substr(0, at)) + std::string(value) + std::string(tpl.substr(at + slot.size()));
}

inline std::string join_phrases(const std::vector<std::string>& phrases) {
  if (phrases.empty()) return std::string(kNoPhrases);
  std::string out;
  for (std::size_t i = 0; i < phrases.size(); ++i) {
    if (i) out += kPhraseDelimiter;
    out += phrases[i];
  }
  return out;
}

// True when some phrase contains the delimiter, so parsing cannot recover
// the phrase list exactly.
inline bool phrases_lossy(const std::vector<std::string>& phrases) {
  for (const auto& p : phrases)
    if (p.find(kPhraseDelimiter) != std::string::npos || p == kNoPhrases) return true;
  return false;
}

inline PromptInstance build_instruction(const Sample& sample, InstructionMode mode) {
  PromptInstance p;
  p.system = std::string(kSystemPrompt);
  p.user = fill_slot(kUserTemplate, "[TWEET]", sample.text);
  if (mode == InstructionMode::train) {
    const std::string with_phrases = fill_slot(kAssistantTemplate, "[PHRASES]", join_phrases(extract_phrases(sample)));
    p.assistant = fill_slot(with_phrases, "[LABEL]", label_name(sample.label));
  }
  return p;
}

// {"messages": [{"role": ..., "content": ...}, ...]}
inline nlohmann::ordered_json to_messages(const PromptInstance& p) {
  nlohmann::ordered_json msgs = nlohmann::ordered_json::array();
  msgs.push_back({{"role", "system"}, {"content", p.system}});
  msgs.push_back({{"role", "user"}, {"content", p.user}});
  if (p.assistant) msgs.push_back({{"role", "assistant"}, {"content", *p.assistant}});
  return {{"messages", msgs}};
}

struct ParsedPrediction {
  Label label = Label::NOT;
  std::vector<std::string> phrases;
  bool parse_ok = false;
  std::string raw;
};

namespace detail {

inline bool word_char(char c) {
  return std::isalnum(static_cast<unsigned char>(c)) || c == '_';
}

// Position of the first standalone OFF or NOT, or npos.
inline std::size_t find_label_token(std::string_view text, Label& label) {
  for (std::size_t i = 0; i + 3 <= text.size(); ++i) {
    const auto w = text.substr(i, 3);
    if (w != "OFF" && w != "NOT") continue;
    const bool left = i == 0 || !word_char(text[i - 1]);
    const bool right = i + 3 == text.size() || !word_char(text[i + 3]);
    if (left && right) {
      label = w == "OFF" ? Label::OFF : Label::NOT;
      return i;
    }
  }
  return std::string_view::npos;
}

}  // namespace detail

// Reads the first standalone OFF/NOT (case-sensitive) and the phrases on the
// first "Phrases:" line after it. Responses without a label fall back to NOT
// with parse_ok = false.
inline ParsedPrediction parse_response(std::string_view text) {
  ParsedPrediction out;
  out.raw = std::string(text);
  Label label = Label::NOT;
  const auto at = detail::find_label_token(text, label);
  if (at == std::string_view::npos) return out;
  out.label = label;
  out.parse_ok = true;
  const auto key = text.find("Phrases:", at + 3);
  if (key == std::string_view::npos) return out;
  auto rest = text.substr(key + 8);
  rest = rest.substr(0, rest.find('\n'));
  while (!rest.empty() && (rest.front() == ' ' || rest.front() == '\t')) rest.remove_prefix(1);
  while (!rest.empty() && (rest.back() == ' ' || rest.back() == '\t' || rest.back() == '\r')) rest.remove_suffix(1);
  if (rest.empty() || rest == kNoPhrases) return out;
  std::size_t start = 0;
  while (true) {
    const auto d = rest.find(kPhraseDelimiter, start);
    out.phrases.emplace_back(rest.substr(start, d - start));
    if (d == std::string_view::npos) break;
    start = d + kPhraseDelimiter.size();
  }
  return out;
}

}  // namespace offlang
