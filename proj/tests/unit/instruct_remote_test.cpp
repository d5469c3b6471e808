#include <atomic>
#include <fstream>
#include <map>
#include <mutex>
#include <thread>

#include <gtest/gtest.h>

#include "offlang/instruct.hpp"
#include "offlang/remote.hpp"
#include "test_util.hpp"

namespace offlang {
namespace {

using test::make_sample;

TEST(Instruction, TrainTemplate) {
  const Sample s = make_sample("a", {"you", "are", "a", "xidiot", "xfool", "ok", "xbad"}, Label::OFF, {0, 0, 0, 1, 1, 0, 1});
  const auto p = build_instruction(s, InstructionMode::train);
  EXPECT_EQ(p.system, kSystemPrompt);
  EXPECT_EQ(p.user,
            "Please classify the following tweet as \"OFF\" or \"NOT\". If offensive, list the specific offensive "
            "phrases:\n\n'you are a xidiot xfool ok xbad'");
  ASSERT_TRUE(p.assistant);
  EXPECT_EQ(*p.assistant, "OFF\nPhrases: xidiot xfool, xbad");
}

TEST(Instruction, NotWithoutPhrasesAndQueryMode) {
  const Sample s = make_sample("n", {"hello", "there"}, Label::NOT);
  EXPECT_EQ(*build_instruction(s, InstructionMode::train).assistant, "NOT\nPhrases: None");
  EXPECT_FALSE(build_instruction(s, InstructionMode::query).assistant);
}

TEST(Instruction, SystemTextIsIdenticalAcrossSamples) {
  const Corpus c = test::small_synthetic(20);
  for (const auto& s : c.samples) {
    EXPECT_EQ(build_instruction(s, InstructionMode::train).system, build_instruction(c.samples[0], InstructionMode::query).system);
  }
}

TEST(Instruction, PlaceholderInTweetIsNotExpanded) {
  const Sample s = make_sample("p", {"[TWEET]", "[LABEL]"}, Label::NOT);
  const auto p = build_instruction(s, InstructionMode::train);
  EXPECT_NE(p.user.find("'[TWEET] [LABEL]'"), std::string::npos);
  EXPECT_EQ(*p.assistant, "NOT\nPhrases: None");
}

TEST(Instruction, MessagesShape) {
  const auto j = to_messages(build_instruction(make_sample("m", {"x"}, Label::NOT), InstructionMode::train));
  ASSERT_EQ(j["messages"].size(), 3u);
  EXPECT_EQ(j["messages"][0]["role"], "system");
  EXPECT_EQ(j["messages"][2]["role"], "assistant");
}

TEST(ParseResponse, Examples) {
  auto p = parse_response("OFF\nPhrases: a b, c");
  EXPECT_TRUE(p.parse_ok);
  EXPECT_EQ(p.label, Label::OFF);
  EXPECT_EQ(p.phrases, (std::vector<std::string>{"a b", "c"}));

  p = parse_response("NOT\nPhrases: None");
  EXPECT_EQ(p.label, Label::NOT);
  EXPECT_TRUE(p.phrases.empty());

  p = parse_response("The answer is OFF.\nPhrases:  xx  \n");
  EXPECT_EQ(p.label, Label::OFF);
  EXPECT_EQ(p.phrases, (std::vector<std::string>{"xx"}));

  p = parse_response("NOTHING here, OFFICE too");
  EXPECT_FALSE(p.parse_ok);
  EXPECT_EQ(p.label, Label::NOT);

  p = parse_response("off");
  EXPECT_FALSE(p.parse_ok);

  p = parse_response("NOT");
  EXPECT_TRUE(p.parse_ok);
  EXPECT_TRUE(p.phrases.empty());
}

TEST(ParseResponse, LossyPhrasesAreFlagged) {
  EXPECT_TRUE(phrases_lossy({"a, b"}));
  EXPECT_TRUE(phrases_lossy({"None"}));
  EXPECT_FALSE(phrases_lossy({"a b", "c"}));
}

TEST(ParseResponse, RoundTripOnRandomSamples) {
  Rng rng(17);
  std::size_t checked = 0;
  for (int i = 0; i < 1000; ++i) {
    std::vector<std::string> tokens;
    std::vector<int> rats;
    const std::size_t n = 1 + rng.below(20);
    const Label label = rng.bernoulli(0.5) ? Label::OFF : Label::NOT;
    for (std::size_t k = 0; k < n; ++k) {
      tokens.push_back(synthetic_word(rng, 1 + rng.below(3)));
      rats.push_back(label == Label::OFF && rng.bernoulli(0.3) ? 1 : 0);
    }
    const Sample s = make_sample("r" + std::to_string(i), tokens, label, rats);
    const auto phrases = extract_phrases(s);
    ASSERT_FALSE(phrases_lossy(phrases));
    const auto parsed = parse_response(*build_instruction(s, InstructionMode::train).assistant);
    ASSERT_TRUE(parsed.parse_ok);
    EXPECT_EQ(parsed.label, label);
    EXPECT_EQ(parsed.phrases, phrases);
    ++checked;
  }
  EXPECT_EQ(checked, 1000u);
}

// Chat-completions stand-in. Replies are scripted per tweet text; a script
// entry may also ask for a delay or an HTTP status on given attempts.
class StubServer {
 public:
  struct Script {
    std::string content;
    int fail_status = 0;        // returned on the first `fail_times` attempts
    int fail_times = 0;
    long first_delay_ms = 0;    // applied on the first attempt only
  };

  explicit StubServer(std::map<std::string, Script> scripts) : scripts_(std::move(scripts)) {
    server_.Post("/v1/chat/completions", [this](const httplib::Request& req, httplib::Response& res) {
      ++requests_;
      const auto body = nlohmann::json::parse(req.body);
      const std::string user = body["messages"][1]["content"];
      std::string key;
      for (const auto& [text, _] : scripts_)
        if (user.find("'" + text + "'") != std::string::npos) key = text;
      int attempt;
      {
        std::lock_guard lock(mu_);
        attempt = ++attempts_[key];
        auth_headers_.push_back(req.get_header_value("Authorization"));
      }
      const Script& s = scripts_.at(key);
      if (attempt == 1 && s.first_delay_ms) std::this_thread::sleep_for(std::chrono::milliseconds(s.first_delay_ms));
      if (attempt <= s.fail_times) {
        res.status = s.fail_status;
        res.set_content("{}", "application/json");
        return;
      }
      nlohmann::json reply = {{"choices", {{{"message", {{"role", "assistant"}, {"content", s.content}}}}}}};
      res.set_content(reply.dump(), "application/json");
    });
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  ~StubServer() {
    server_.stop();
    thread_.join();
  }

  std::string endpoint() const { return "http://127.0.0.1:" + std::to_string(port_) + "/v1/chat/completions"; }
  std::size_t requests() const { return requests_; }
  std::vector<std::string> auth_headers() {
    std::lock_guard lock(mu_);
    return auth_headers_;
  }

 private:
  std::map<std::string, Script> scripts_;
  httplib::Server server_;
  std::thread thread_;
  int port_ = 0;
  std::atomic<std::size_t> requests_{0};
  std::mutex mu_;
  std::map<std::string, int> attempts_;
  std::vector<std::string> auth_headers_;
};

Corpus four_samples() {
  Corpus c;
  c.samples = {make_sample("s1", {"alpha", "xbad"}, Label::OFF, {0, 1}), make_sample("s2", {"beta"}, Label::NOT),
               make_sample("s3", {"gamma", "xvile"}, Label::OFF, {0, 1}), make_sample("s4", {"delta"}, Label::NOT)};
  return c;
}

RemoteClientConfig stub_config(const StubServer& s) {
  RemoteClientConfig c;
  c.endpoint = s.endpoint();
  c.api_key_env = "";
  c.max_concurrent = 2;
  c.backoff_ms = {10, 10, 10};
  c.timeout_ms = 2000;
  return c;
}

std::vector<nlohmann::json> log_lines(const std::string& path) {
  std::vector<nlohmann::json> out;
  std::ifstream in(path);
  std::string line;
  while (std::getline(in, line)) out.push_back(nlohmann::json::parse(line));
  return out;
}

TEST(EvalRemote, ScriptedMetricsAndRefusal) {
  StubServer stub({{"alpha xbad", {"OFF\nPhrases: xbad"}},
                   {"beta", {"OFF\nPhrases: beta"}},
                   {"gamma xvile", {"I can't help with that."}},
                   {"delta", {"NOT\nPhrases: None"}}});
  test::TempDir dir;
  const Corpus c = four_samples();
  const auto r = eval_remote(stub_config(stub), c, dir.file("audit.jsonl"));
  // Predictions: OFF, OFF, NOT (refusal fallback), NOT.
  const auto expect = evaluate_labels({Label::OFF, Label::NOT, Label::OFF, Label::NOT},
                                      {Label::OFF, Label::OFF, Label::NOT, Label::NOT});
  EXPECT_EQ(r.report, expect);
  EXPECT_DOUBLE_EQ(r.failure_rate, 0.25);
  EXPECT_EQ(r.requests_sent, 4u);
  EXPECT_EQ(r.predictions.at("s1").phrases, (std::vector<std::string>{"xbad"}));
  EXPECT_FALSE(r.predictions.at("s3").parse_ok);
  const auto lines = log_lines(dir.file("audit.jsonl"));
  ASSERT_EQ(lines.size(), 4u);
  for (const auto& l : lines) {
    EXPECT_EQ(l["request"]["temperature"], 0.0);
    EXPECT_EQ(l["request"]["model"], "gpt-4o-2024-05-13");
  }
}

TEST(EvalRemote, TimeoutThenSuccessLogsBothAttempts) {
  StubServer stub({{"alpha xbad", {"OFF\nPhrases: xbad", 0, 0, 1500}},
                   {"beta", {"NOT\nPhrases: None"}},
                   {"gamma xvile", {"OFF\nPhrases: xvile", 503, 1}},
                   {"delta", {"NOT\nPhrases: None"}}});
  test::TempDir dir;
  auto cfg = stub_config(stub);
  cfg.timeout_ms = 300;
  const auto r = eval_remote(cfg, four_samples(), dir.file("audit.jsonl"));
  EXPECT_DOUBLE_EQ(r.report.macro_f1, 1.0);
  EXPECT_EQ(r.failure_rate, 0.0);
  std::map<std::string, int> attempts;
  for (const auto& l : log_lines(dir.file("audit.jsonl"))) attempts[l["id"]] = std::max(attempts[l["id"]], l["attempt"].get<int>());
  EXPECT_EQ(attempts["s1"], 2);
  EXPECT_EQ(attempts["s3"], 2);
  EXPECT_EQ(attempts["s2"], 1);
}

TEST(EvalRemote, ExhaustedRetriesFallBackToNot) {
  StubServer stub({{"alpha xbad", {"OFF", 500, 100}},
                   {"beta", {"NOT"}},
                   {"gamma xvile", {"OFF"}},
                   {"delta", {"NOT"}}});
  test::TempDir dir;
  auto cfg = stub_config(stub);
  cfg.max_retries = 2;
  const auto r = eval_remote(cfg, four_samples(), dir.file("audit.jsonl"));
  EXPECT_EQ(r.predictions.at("s1").label, Label::NOT);
  EXPECT_FALSE(r.predictions.at("s1").parse_ok);
  EXPECT_EQ(r.requests_sent, 6u);
  bool exhausted = false;
  for (const auto& l : log_lines(dir.file("audit.jsonl")))
    if (l.value("exhausted", false)) exhausted = true;
  EXPECT_TRUE(exhausted);
}

TEST(EvalRemote, ResumeSendsNoDuplicateRequests) {
  StubServer stub({{"alpha xbad", {"OFF"}}, {"beta", {"NOT"}}, {"gamma xvile", {"OFF"}}, {"delta", {"NOT"}}});
  test::TempDir dir;
  const Corpus c = four_samples();
  Corpus first;
  first.samples = {c.samples[0], c.samples[1]};
  eval_remote(stub_config(stub), first, dir.file("audit.jsonl"));
  EXPECT_EQ(stub.requests(), 2u);
  // Simulate a torn final line from an interrupted write.
  std::ofstream(dir.file("audit.jsonl"), std::ios::app) << "{\"id\":\"s3\",\"att";
  std::ofstream(dir.file("audit.jsonl"), std::ios::app) << "\n";
  const auto r = eval_remote(stub_config(stub), c, dir.file("audit.jsonl"));
  EXPECT_EQ(r.requests_sent, 2u);
  EXPECT_EQ(stub.requests(), 4u);
  const auto again = eval_remote(stub_config(stub), c, dir.file("audit.jsonl"));
  EXPECT_EQ(again.requests_sent, 0u);
  EXPECT_EQ(stub.requests(), 4u);
  EXPECT_EQ(again.report, r.report);
}

TEST(EvalRemote, MissingCredentialFailsBeforeAnyRequest) {
  StubServer stub(std::map<std::string, StubServer::Script>{{"alpha xbad", {"OFF"}}});
  test::TempDir dir;
  auto cfg = stub_config(stub);
  cfg.api_key_env = "OFFLANG_TEST_SURELY_UNSET_KEY";
  ::unsetenv(cfg.api_key_env.c_str());
  EXPECT_THROW(eval_remote(cfg, four_samples(), dir.file("audit.jsonl")), AuthenticationError);
  EXPECT_EQ(stub.requests(), 0u);
  EXPECT_FALSE(std::filesystem::exists(dir.file("audit.jsonl")));
}

TEST(EvalRemote, BearerTokenFromEnvironmentAndAuthRejection) {
  StubServer stub({{"alpha xbad", {"OFF", 401, 100}}, {"beta", {"NOT", 401, 100}},
                   {"gamma xvile", {"OFF", 401, 100}}, {"delta", {"NOT", 401, 100}}});
  test::TempDir dir;
  auto cfg = stub_config(stub);
  cfg.api_key_env = "OFFLANG_TEST_KEY";
  cfg.max_concurrent = 1;
  ::setenv("OFFLANG_TEST_KEY", "sekrit", 1);
  EXPECT_THROW(eval_remote(cfg, four_samples(), dir.file("audit.jsonl")), AuthenticationError);
  ::unsetenv("OFFLANG_TEST_KEY");
  EXPECT_EQ(stub.requests(), 1u);
  ASSERT_FALSE(stub.auth_headers().empty());
  EXPECT_EQ(stub.auth_headers()[0], "Bearer sekrit");
  // The credential never reaches the audit log.
  std::ifstream in(dir.file("audit.jsonl"));
  const std::string logged((std::istreambuf_iterator<char>(in)), {});
  EXPECT_EQ(logged.find("sekrit"), std::string::npos);
}

TEST(EvalRemote, ConfigRoundTripAndEndpointSplit) {
  RemoteClientConfig c;
  c.max_retries = 7;
  const nlohmann::json j = c;
  EXPECT_EQ(j.get<RemoteClientConfig>().max_retries, 7u);
  const auto ep = split_endpoint("http://localhost:8080/v1/chat/completions");
  EXPECT_EQ(ep.origin, "http://localhost:8080");
  EXPECT_EQ(ep.path, "/v1/chat/completions");
  EXPECT_THROW(split_endpoint("localhost/x"), ConfigError);
  c.max_concurrent = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_THROW(eval_remote(RemoteClientConfig{}, Corpus{}, "/tmp/x"), ValidationError);
}

}  // namespace
}  // namespace offlang
