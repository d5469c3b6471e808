#pragma once

// Zero-shot evaluation against a chat-completions endpoint.
//
// Each sample becomes one query-mode prompt, POSTed as
//   {"model": ..., "messages": [system, user], "temperature": 0}
// with at most max_concurrent requests in flight. Every attempt is appended
// to a JSONL audit log as {id, attempt, request, response, error, parsed};
// parsed is non-null only on an id's final record. Re-running with the same
// log skips ids that already have a final record, and metrics are computed
// from the id-keyed log in corpus order.

#include <atomic>
#include <chrono>
#include <cstdlib>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

// Eigen must precede httplib: <resolv.h> defines a _res macro that clashes
// with Eigen parameter names.
#include "offlang/tensor.hpp"

#include <httplib.h>
#include <json.hpp>

#include "offlang/corpus.hpp"
#include "offlang/errors.hpp"
#include "offlang/instruct.hpp"
#include "offlang/metrics.hpp"

namespace offlang {

struct RemoteClientConfig {
  std::string endpoint = "https://api.openai.com/v1/chat/completions";
  std::string model = "gpt-4o-2024-05-13";
  std::string api_key_env = "OPENAI_API_KEY";  // empty: send no credential
  std::size_t max_concurrent = 4;
  std::size_t max_retries = 3;
  std::vector<long> backoff_ms = {500, 2000, 8000};
  long timeout_ms = 60000;
  double temperature = 0.0;

  void validate() const {
    if (max_concurrent < 1) throw ConfigError("remote.max_concurrent must be at least 1");
    if (timeout_ms <= 0) throw ConfigError("remote.timeout_ms must be positive");
    if (model.empty()) throw ConfigError("remote.model must be set");
  }
};

inline void to_json(nlohmann::json& j, const RemoteClientConfig& c) {
  j = nlohmann::json{{"endpoint", c.endpoint},       {"model", c.model},
                     {"api_key_env", c.api_key_env}, {"max_concurrent", c.max_concurrent},
                     {"max_retries", c.max_retries}, {"backoff_ms", c.backoff_ms},
                     {"timeout_ms", c.timeout_ms},   {"temperature", c.temperature}};
}

inline void from_json(const nlohmann::json& j, RemoteClientConfig& c) {
  RemoteClientConfig d;
  c.endpoint = j.value("endpoint", d.endpoint);
  c.model = j.value("model", d.model);
  c.api_key_env = j.value("api_key_env", d.api_key_env);
  c.max_concurrent = j.value("max_concurrent", d.max_concurrent);
  c.max_retries = j.value("max_retries", d.max_retries);
  c.backoff_ms = j.value("backoff_ms", d.backoff_ms);
  c.timeout_ms = j.value("timeout_ms", d.timeout_ms);
  c.temperature = j.value("temperature", d.temperature);
}

struct Endpoint {
  std::string origin;  // scheme://host[:port]
  std::string path;
};

inline Endpoint split_endpoint(const std::string& url) {
  const auto scheme = url.find("://");
  if (scheme == std::string::npos) throw ConfigError("endpoint '" + url + "' lacks a scheme");
#ifndef CPPHTTPLIB_OPENSSL_SUPPORT
  if (url.compare(0, scheme, "https") == 0)
    throw ConfigError("endpoint '" + url + "' needs TLS, but this build has no OpenSSL support");
#endif
  const auto slash = url.find('/', scheme + 3);
  if (slash == std::string::npos) return {url, "/"};
  return {url.substr(0, slash), url.substr(slash)};
}

inline nlohmann::ordered_json chat_request(const RemoteClientConfig& cfg, const PromptInstance& p) {
  nlohmann::ordered_json body;
  body["model"] = cfg.model;
  body["messages"] = nlohmann::ordered_json::array(
      {{{"role", "system"}, {"content", p.system}}, {{"role", "user"}, {"content", p.user}}});
  body["temperature"] = cfg.temperature;
  return body;
}

inline nlohmann::ordered_json to_json(const ParsedPrediction& p) {
  return {{"label", label_name(p.label)}, {"phrases", p.phrases}, {"parse_ok", p.parse_ok}, {"raw", p.raw}};
}

inline ParsedPrediction parsed_from_json(const nlohmann::json& j) {
  ParsedPrediction p;
  p.label = parse_label(j.at("label").get<std::string>()).value_or(Label::NOT);
  p.phrases = j.at("phrases").get<std::vector<std::string>>();
  p.parse_ok = j.at("parse_ok").get<bool>();
  p.raw = j.value("raw", "");
  return p;
}

struct RemoteEvalResult {
  MetricsReport report;
  double failure_rate = 0.0;
  std::size_t requests_sent = 0;  // this invocation only
  std::map<std::string, ParsedPrediction> predictions;
};

class AuthenticationError : public Error {
 public:
  using Error::Error;
};

// Reads the final record per id from an audit log; missing file is empty.
inline std::map<std::string, ParsedPrediction> read_audit_log(const std::string& path) {
  std::map<std::string, ParsedPrediction> done;
  std::ifstream in(path);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception&) {
      continue;  // torn final line after an interruption
    }
    if (j.contains("parsed") && !j["parsed"].is_null()) done[j.at("id").get<std::string>()] = parsed_from_json(j["parsed"]);
  }
  return done;
}

inline RemoteEvalResult eval_remote(const RemoteClientConfig& cfg, const Corpus& corpus, const std::string& log_path) {
  cfg.validate();
  if (corpus.empty()) throw ValidationError("remote evaluation needs a non-empty corpus");
  std::string token;
  if (!cfg.api_key_env.empty()) {
    const char* v = std::getenv(cfg.api_key_env.c_str());
    if (!v || !*v) throw AuthenticationError("credential variable " + cfg.api_key_env + " is not set");
    token = v;
  }
  const Endpoint ep = split_endpoint(cfg.endpoint);

  RemoteEvalResult result;
  auto done = read_audit_log(log_path);
  std::vector<const Sample*> pending;
  for (const auto& s : corpus.samples)
    if (!done.count(s.id)) pending.push_back(&s);

  std::ofstream log(log_path, std::ios::app);
  if (!log) throw Error("cannot open audit log '" + log_path + "'");
  std::mutex mu;
  std::atomic<std::size_t> next{0};
  std::atomic<std::size_t> sent{0};
  std::atomic<bool> abort{false};
  std::string abort_reason;

  auto append = [&](const nlohmann::ordered_json& rec, const std::string& id, const ParsedPrediction* final) {
    std::lock_guard lock(mu);
    log << rec.dump() << '\n';
    log.flush();
    if (final) done[id] = *final;
  };

  auto worker = [&] {
    httplib::Client client(ep.origin);
    client.set_connection_timeout(std::chrono::milliseconds(cfg.timeout_ms));
    client.set_read_timeout(std::chrono::milliseconds(cfg.timeout_ms));
    client.set_write_timeout(std::chrono::milliseconds(cfg.timeout_ms));
    if (!token.empty()) client.set_bearer_token_auth(token);
    for (std::size_t i = next++; i < pending.size() && !abort; i = next++) {
      const Sample& s = *pending[i];
      const auto body = chat_request(cfg, build_instruction(s, InstructionMode::query));
      const std::string payload = body.dump();
      bool finished = false;
      for (std::size_t attempt = 1; attempt <= cfg.max_retries + 1 && !abort; ++attempt) {
        nlohmann::ordered_json rec;
        rec["id"] = s.id;
        rec["attempt"] = attempt;
        rec["request"] = body;
        ++sent;
        auto res = client.Post(ep.path, payload, "application/json");
        std::optional<std::string> content;
        std::string error;
        if (!res) {
          error = "transport: " + httplib::to_string(res.error());
          rec["response"] = nullptr;
        } else {
          rec["response"] = res->body;
          if (res->status == 401 || res->status == 403) {
            error = "authentication rejected (HTTP " + std::to_string(res->status) + ")";
            rec["error"] = error;
            rec["parsed"] = nullptr;
            append(rec, s.id, nullptr);
            std::lock_guard lock(mu);
            abort_reason = error;
            abort = true;
            break;
          }
          if (res->status == 200) {
            try {
              const auto j = nlohmann::json::parse(res->body);
              content = j.at("choices").at(0).at("message").at("content").get<std::string>();
            } catch (const nlohmann::json::exception& e) {
              error = std::string("malformed response: ") + e.what();
            }
          } else {
            error = "HTTP " + std::to_string(res->status);
          }
        }
        if (content) {
          const ParsedPrediction parsed = parse_response(*content);
          rec["error"] = nullptr;
          rec["parsed"] = to_json(parsed);
          append(rec, s.id, &parsed);
          finished = true;
          break;
        }
        rec["error"] = error;
        const bool last = attempt == cfg.max_retries + 1;
        if (last) {
          ParsedPrediction fallback;
          fallback.raw = "";
          rec["parsed"] = to_json(fallback);
          rec["exhausted"] = true;
          append(rec, s.id, &fallback);
          finished = true;
        } else {
          rec["parsed"] = nullptr;
          append(rec, s.id, nullptr);
          const long wait = cfg.backoff_ms.empty() ? 0 : cfg.backoff_ms[std::min(attempt - 1, cfg.backoff_ms.size() - 1)];
          std::this_thread::sleep_for(std::chrono::milliseconds(wait));
        }
      }
      (void)finished;
    }
  };

  const std::size_t n_threads = std::min(cfg.max_concurrent, std::max<std::size_t>(pending.size(), 1));
  if (!pending.empty()) {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < n_threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (abort) throw AuthenticationError(abort_reason);

  result.requests_sent = sent;
  std::vector<Label> gold, pred;
  std::size_t failures = 0;
  for (const auto& s : corpus.samples) {
    auto it = done.find(s.id);
    if (it == done.end()) throw Error("no final record for sample '" + s.id + "'");
    gold.push_back(s.label);
    pred.push_back(it->second.label);
    if (!it->second.parse_ok) ++failures;
    result.predictions[s.id] = it->second;
  }
  result.report = evaluate_labels(gold, pred);
  result.failure_rate = static_cast<double>(failures) / static_cast<double>(corpus.size());
  return result;
}

}  // namespace offlang
