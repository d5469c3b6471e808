#pragma once

// Command-line driver. One subcommand per pipeline step:
//
//   ingest | stats | split | pretrain | finetune | ablate | evaluate |
//   build-instructions | eval-remote | report
//
// Common flags: --config FILE, then any number of `--dot.path value`
// overrides. Each run writes into <paths.output_dir>/<command>-<hash>/ where
// the hash covers the command, its options and the resolved configuration;
// run_manifest.json there records the configuration, the seed and digests of
// every input. Logs go to the log stream (stderr), data only to files.
//
// Exit status: 0 success, 1 operational failure, 2 usage or configuration
// error.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <iterator>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "offlang/ablation.hpp"
#include "offlang/config.hpp"
#include "offlang/corpus.hpp"
#include "offlang/errors.hpp"
#include "offlang/instruct.hpp"
#include "offlang/metrics.hpp"
#include "offlang/model.hpp"
#include "offlang/remote.hpp"
#include "offlang/synthetic.hpp"
#include "offlang/training.hpp"

namespace offlang {

namespace fs = std::filesystem;

class UsageError : public Error {
 public:
  using Error::Error;
};

namespace cli {

inline std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw Error("cannot read '" + p.string() + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const fs::path& p, const std::string& data) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw Error("cannot write '" + p.string() + "'");
  out << data;
}

// Content digest of a file, or of manifest.json + weights.bin for a
// checkpoint directory.
inline std::string digest(const fs::path& p) {
  if (fs::is_directory(p)) {
    std::uint64_t h = fnv1a(read_file(p / "manifest.json"));
    if (fs::exists(p / "weights.bin")) h = fnv1a(read_file(p / "weights.bin"), h);
    return hex64(h);
  }
  return hex64(fnv1a(read_file(p)));
}

struct Context {
  std::string command;
  RunConfig cfg;
  nlohmann::json options = nlohmann::json::object();
  std::ostream& log;
  nlohmann::ordered_json inputs = nlohmann::ordered_json::object();
  fs::path run_dir;

  void info(const std::string& msg) const { log << "offlang " << command << ": " << msg << '\n'; }

  void input(const std::string& role, const std::string& path) {
    if (!path.empty()) inputs[role] = {{"path", path}, {"digest", digest(path)}};
  }

  // Creates the run directory and writes its manifest.
  fs::path open_run() {
    nlohmann::json snapshot = cfg;
    nlohmann::json key = {{"command", command}, {"options", options}, {"config", snapshot}};
    const std::string hash = config_hash(key);
    run_dir = fs::path(cfg.paths.output_dir) / (command + "-" + hash.substr(0, 12));
    fs::create_directories(run_dir);
    nlohmann::ordered_json m;
    m["command"] = command;
    m["config_hash"] = hash;
    m["seed"] = cfg.seed;
    m["options"] = options;
    m["inputs"] = inputs;
    m["config"] = snapshot;
    write_file(run_dir / "run_manifest.json", m.dump(2) + "\n");
    info("writing to " + run_dir.string());
    return run_dir;
  }
};

inline Corpus load(Context& ctx, const std::string& role, const std::string& path, SplitTag tag) {
  auto lc = load_corpus(path, format_for_path(path), tag);
  for (const auto& w : lc.summary.warnings) ctx.info("warning: " + w);
  ctx.input(role, path);
  return std::move(lc.corpus);
}

inline const std::string& require_path(const std::string& key, const std::string& value) {
  if (value.empty()) throw ConfigError("paths." + key + " must be set for this command");
  return value;
}

// Training and validation corpora; without paths.val the training file is
// split with split.val_ratio.
inline std::pair<Corpus, Corpus> train_val(Context& ctx) {
  const auto& c = ctx.cfg;
  Corpus train = load(ctx, "train", require_path("train", c.paths.train), SplitTag::train);
  if (!c.paths.val.empty()) return {std::move(train), load(ctx, "val", c.paths.val, SplitTag::val)};
  auto [a, b] = split_train_val(train, 1.0 - c.split.val_ratio, c.seed, c.split.stratified);
  ctx.info("validation carved from training data: " + std::to_string(a.size()) + " / " + std::to_string(b.size()));
  return {std::move(a), std::move(b)};
}

inline Model base_model(Context& ctx, const Corpus& train) {
  const auto& c = ctx.cfg;
  if (!c.paths.pretrained.empty()) {
    ctx.input("pretrained", c.paths.pretrained);
    return load_checkpoint(c.paths.pretrained).model;
  }
  return make_base_model(train, c.encoder, c.seed, c.tokenizer);
}

inline nlohmann::ordered_json history_json(const std::vector<EpochStats>& h) {
  nlohmann::ordered_json a = nlohmann::ordered_json::array();
  for (const auto& e : h) a.push_back({{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"val_metric", e.val_metric}});
  return a;
}

inline nlohmann::ordered_json confusion_json(const ConfusionMatrix& cm) {
  return {{"gold_OFF", {{"OFF", cm.at(Label::OFF, Label::OFF)}, {"NOT", cm.at(Label::OFF, Label::NOT)}}},
          {"gold_NOT", {{"OFF", cm.at(Label::NOT, Label::OFF)}, {"NOT", cm.at(Label::NOT, Label::NOT)}}}};
}

inline void write_metrics(Context& ctx, const std::string& name, const MetricsReport& r, nlohmann::ordered_json extra) {
  nlohmann::ordered_json j;
  j["name"] = name;
  j["metrics"] = to_json(r);
  for (auto it = extra.begin(); it != extra.end(); ++it) j[it.key()] = it.value();
  write_file(ctx.run_dir / "metrics.json", j.dump(2) + "\n");
  write_file(ctx.run_dir / "report.txt", render_report({{name, r, false, ""}}, ctx.cfg.precision));
  ctx.info(name + " macro-F1 " + format_fixed(r.macro_f1, ctx.cfg.precision));
}

// ---------------------------------------------------------------------------
// Commands

inline void cmd_ingest(Context& ctx, std::optional<std::size_t> synthetic) {
  const auto& c = ctx.cfg;
  if (synthetic) {
    SyntheticOptions so;
    so.n_samples = *synthetic;
    const Corpus all = make_synthetic_corpus(so, c.seed);
    auto [train, test] = split_train_val(all, 1.0 - c.split.val_ratio, c.seed, c.split.stratified);
    ctx.open_run();
    save_corpus(train, (ctx.run_dir / "train.jsonl").string(), RecordFormat::jsonl);
    save_corpus(test, (ctx.run_dir / "test.jsonl").string(), RecordFormat::jsonl);
    ctx.info("synthetic corpus: " + std::to_string(train.size()) + " train, " + std::to_string(test.size()) + " test");
    return;
  }
  std::vector<std::pair<std::string, std::pair<std::string, SplitTag>>> roles = {
      {"train", {c.paths.train, SplitTag::train}}, {"val", {c.paths.val, SplitTag::val}}, {"test", {c.paths.test, SplitTag::test}}};
  std::vector<std::pair<std::string, LoadedCorpus>> loaded;
  for (const auto& [role, spec] : roles) {
    if (spec.first.empty()) continue;
    auto lc = load_corpus(spec.first, format_for_path(spec.first), spec.second);
    for (const auto& w : lc.summary.warnings) ctx.info("warning: " + w);
    ctx.input(role, spec.first);
    loaded.emplace_back(role, std::move(lc));
  }
  if (loaded.empty()) throw ConfigError("ingest needs paths.train, paths.val or paths.test (or --synthetic N)");
  ctx.open_run();
  nlohmann::ordered_json summary = nlohmann::ordered_json::object();
  for (const auto& [role, lc] : loaded) {
    save_corpus(lc.corpus, (ctx.run_dir / (role + ".jsonl")).string(), RecordFormat::jsonl);
    summary[role] = {{"records", lc.summary.n_records},
                     {"not_with_rationales", lc.summary.n_not_with_rationales},
                     {"warnings", lc.summary.warnings}};
  }
  write_file(ctx.run_dir / "validation.json", summary.dump(2) + "\n");
}

inline void cmd_stats(Context& ctx) {
  const auto& c = ctx.cfg;
  std::vector<Corpus> corpora;
  if (!c.paths.train.empty()) corpora.push_back(load(ctx, "train", c.paths.train, SplitTag::train));
  if (!c.paths.val.empty()) corpora.push_back(load(ctx, "val", c.paths.val, SplitTag::val));
  if (!c.paths.test.empty()) corpora.push_back(load(ctx, "test", c.paths.test, SplitTag::test));
  if (corpora.empty()) throw ConfigError("stats needs at least one of paths.train, paths.val, paths.test");
  std::vector<const Corpus*> ptrs;
  for (const auto& k : corpora) ptrs.push_back(&k);
  const auto report = class_distribution(ptrs);
  ctx.open_run();
  write_file(ctx.run_dir / "distribution.json", to_json(report).dump(2) + "\n");
  write_file(ctx.run_dir / "distribution.txt", render_distribution(report));
  ctx.info(std::to_string(report.n_off) + " OFF / " + std::to_string(report.n_not) + " NOT");
}

inline void cmd_split(Context& ctx) {
  const auto& c = ctx.cfg;
  const Corpus all = load(ctx, "train", require_path("train", c.paths.train), SplitTag::unsplit);
  auto [train, val] = split_train_val(all, 1.0 - c.split.val_ratio, c.seed, c.split.stratified);
  ctx.open_run();
  save_corpus(train, (ctx.run_dir / "train.jsonl").string(), RecordFormat::jsonl);
  save_corpus(val, (ctx.run_dir / "val.jsonl").string(), RecordFormat::jsonl);
  ctx.info(std::to_string(train.size()) + " train / " + std::to_string(val.size()) + " val");
}

inline void cmd_pretrain(Context& ctx) {
  auto [train, val] = train_val(ctx);
  Model base = base_model(ctx, train);
  ctx.open_run();
  const auto res = run_stage1(train, val, ctx.cfg.stage1_config(), std::move(base), ctx.run_dir / "stage1");
  nlohmann::ordered_json j;
  j["best_checkpoint"] = fs::relative(res.manifest.path, ctx.run_dir).string();
  j["best_epoch"] = res.manifest.epoch;
  j[res.manifest.metric_name] = res.manifest.metric_value;
  j["history"] = history_json(res.history);
  write_file(ctx.run_dir / "stage1.json", j.dump(2) + "\n");
  ctx.info("best epoch " + std::to_string(res.manifest.epoch) + ", " + res.manifest.metric_name + " " +
           format_fixed(res.manifest.metric_value, 6));
}

inline void cmd_finetune(Context& ctx) {
  const auto& c = ctx.cfg;
  auto [train, val] = train_val(ctx);
  const Corpus test = load(ctx, "test", require_path("test", c.paths.test), SplitTag::test);
  std::optional<Model> init;
  if (!c.paths.init_checkpoint.empty()) {
    ctx.input("init_checkpoint", c.paths.init_checkpoint);
    init = load_checkpoint(c.paths.init_checkpoint).model;
  }
  const Model base = init ? *init : base_model(ctx, train);
  ctx.open_run();
  const auto res = run_stage2(train, val, test, c.stage2_config(), base, init ? &*init : nullptr, ctx.run_dir / "stage2");
  write_metrics(ctx, init ? "stage1+stage2" : "stage2", res.test_report,
                {{"best_checkpoint", fs::relative(res.manifest.path, ctx.run_dir).string()},
                 {"best_epoch", res.manifest.epoch},
                 {"val_macro_f1", res.manifest.metric_value},
                 {"confusion", confusion_json(res.test_confusion)},
                 {"history", history_json(res.history)}});
}

inline void cmd_ablate(Context& ctx) {
  const auto& c = ctx.cfg;
  auto [train, val] = train_val(ctx);
  const Corpus test = load(ctx, "test", require_path("test", c.paths.test), SplitTag::test);
  AblationBase base{c.encoder, c.stage1_config(), c.stage2_config(), c.tokenizer, std::nullopt};
  if (!c.paths.pretrained.empty()) base.pretrained = base_model(ctx, train);
  ctx.open_run();
  const auto report = run_ablation_suite(train, val, test, c.ablation, base, c.parallel);
  write_file(ctx.run_dir / "ablation.json", to_json(report).dump(2) + "\n");
  write_file(ctx.run_dir / "ablation.txt", render_ablation(report, c.precision));
  std::size_t failed = 0;
  for (const auto& a : report.arms) {
    if (a.failed) {
      ++failed;
      ctx.info("arm '" + a.arm.label + "' failed: " + a.error);
    }
  }
  if (failed == report.arms.size()) throw Error("every ablation arm failed");
}

inline void cmd_evaluate(Context& ctx) {
  const auto& c = ctx.cfg;
  const Corpus test = load(ctx, "test", require_path("test", c.paths.test), SplitTag::test);
  ctx.input("checkpoint", require_path("checkpoint", c.paths.checkpoint));
  const auto lc = load_checkpoint(c.paths.checkpoint);
  ctx.open_run();
  const auto cm = evaluate_confusion(lc.model, test);
  write_metrics(ctx, "evaluate", aggregate(cm), {{"confusion", confusion_json(cm)}});
}

inline void cmd_build_instructions(Context& ctx) {
  const auto& c = ctx.cfg;
  if (c.paths.train.empty() && c.paths.test.empty())
    throw ConfigError("build-instructions needs paths.train and/or paths.test");
  std::optional<Corpus> train, test;
  if (!c.paths.train.empty()) train = load(ctx, "train", c.paths.train, SplitTag::train);
  if (!c.paths.test.empty()) test = load(ctx, "test", c.paths.test, SplitTag::test);
  ctx.open_run();
  auto emit = [&](const Corpus& corpus, InstructionMode mode, const std::string& file) {
    std::ostringstream os;
    std::size_t lossy = 0;
    for (const auto& s : corpus.samples) {
      if (mode == InstructionMode::train && phrases_lossy(extract_phrases(s))) {
        ++lossy;
        ctx.info("warning: phrases of '" + s.id + "' contain the delimiter; round trip is lossy");
      }
      auto j = to_messages(build_instruction(s, mode));
      if (mode == InstructionMode::query) j["id"] = s.id;
      os << j.dump() << '\n';
    }
    write_file(ctx.run_dir / file, os.str());
    ctx.info(file + ": " + std::to_string(corpus.size()) + " records, " + std::to_string(lossy) + " lossy");
  };
  if (train) emit(*train, InstructionMode::train, "train_instructions.jsonl");
  if (test) emit(*test, InstructionMode::query, "test_queries.jsonl");
}

inline void cmd_eval_remote(Context& ctx) {
  const auto& c = ctx.cfg;
  const Corpus test = load(ctx, "test", require_path("test", c.paths.test), SplitTag::test);
  if (!c.remote.api_key_env.empty()) {
    const char* v = std::getenv(c.remote.api_key_env.c_str());
    if (!v || !*v) throw AuthenticationError("credential variable " + c.remote.api_key_env + " is not set");
  }
  ctx.open_run();
  const auto res = eval_remote(c.remote, test, (ctx.run_dir / "audit.jsonl").string());
  ctx.info(std::to_string(res.requests_sent) + " request(s) sent, parse-failure rate " + format_fixed(res.failure_rate, 4));
  write_metrics(ctx, c.remote.model, res.report, {{"parse_failure_rate", res.failure_rate}});
}

inline MetricsReport read_report(const std::string& path, std::string& name) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("'" + path + "' is not valid JSON: " + e.what());
  }
  name = j.value("name", fs::path(path).parent_path().filename().string());
  return report_from_json(j.contains("metrics") ? j["metrics"] : j);
}

inline void cmd_report(Context& ctx, bool compare) {
  const auto& files = ctx.cfg.paths.reports;
  if (files.empty()) throw ConfigError("report needs at least one metrics file (--input or paths.reports)");
  if (compare && files.size() != 2) throw ConfigError("report --compare needs exactly two metrics files");
  std::vector<NamedReport> rows;
  for (const auto& f : files) {
    ctx.input("report:" + f, f);
    std::string name;
    const MetricsReport r = read_report(f, name);
    rows.push_back({name, r, false, ""});
  }
  ctx.open_run();
  if (compare) {
    write_file(ctx.run_dir / "comparison.json", compare_reports(rows[0].report, rows[1].report).dump(2) + "\n");
    write_file(ctx.run_dir / "comparison.txt",
               render_comparison(rows[0].name, rows[0].report, rows[1].name, rows[1].report, ctx.cfg.precision));
    return;
  }
  nlohmann::ordered_json j = nlohmann::ordered_json::array();
  for (const auto& r : rows) j.push_back({{"name", r.name}, {"metrics", to_json(r.report)}});
  write_file(ctx.run_dir / "report.json", j.dump(2) + "\n");
  write_file(ctx.run_dir / "report.txt", render_report(rows, ctx.cfg.precision));
}

// `--a.b value` and `--a.b=value` pairs left over by the option parser.
inline std::vector<std::pair<std::string, std::string>> parse_overrides(const std::vector<std::string>& extras) {
  std::vector<std::pair<std::string, std::string>> out;
  for (std::size_t i = 0; i < extras.size(); ++i) {
    const std::string& a = extras[i];
    if (a.rfind("--", 0) != 0 || a.size() == 2) throw UsageError("unexpected argument '" + a + "'");
    const auto eq = a.find('=');
    if (eq != std::string::npos) {
      out.emplace_back(a.substr(2, eq - 2), a.substr(eq + 1));
    } else if (i + 1 < extras.size()) {
      out.emplace_back(a.substr(2), extras[++i]);
    } else {
      throw UsageError("override '" + a + "' lacks a value");
    }
  }
  return out;
}

}  // namespace cli

inline int run_command(const std::vector<std::string>& args, std::ostream& log = std::cerr) {
  CLI::App app{"Offensive-language detection pipeline with masked rationale pre-finetuning", "offlang"};
  app.require_subcommand(1);
  std::string config_path;
  std::optional<std::size_t> synthetic;
  std::vector<std::string> inputs;
  bool compare = false;

  const std::vector<std::pair<std::string, std::string>> commands = {
      {"ingest", "validate and normalize corpus files, or generate a synthetic corpus"},
      {"stats", "class distribution per split"},
      {"split", "deterministic train/validation split"},
      {"pretrain", "intermediate pre-finetuning (MRP or MLM)"},
      {"finetune", "classification fine-tuning and test evaluation"},
      {"ablate", "run the ablation grid"},
      {"evaluate", "score a checkpoint on the test corpus"},
      {"build-instructions", "write chat-format instruction records"},
      {"eval-remote", "zero-shot evaluation against a chat-completions endpoint"},
      {"report", "render or compare metrics files"}};
  std::vector<CLI::App*> subs;
  for (const auto& [name, desc] : commands) {
    auto* s = app.add_subcommand(name, desc);
    s->allow_extras();
    s->add_option("--config", config_path, "JSON run configuration");
    s->footer("Any configuration key can be overridden with --dot.path value, e.g. --stage1.mask_ratio 0.5");
    if (name == "ingest") s->add_option("--synthetic", synthetic, "generate N synthetic samples instead of reading files");
    if (name == "report") {
      s->add_option("--input", inputs, "metrics JSON file (repeatable)");
      s->add_flag("--compare", compare, "diff exactly two reports");
    }
    subs.push_back(s);
  }

  if (!args.empty() && args[0].rfind("-", 0) != 0) {
    bool known = false;
    for (const auto& c : commands) known = known || c.first == args[0];
    if (!known) {
      log << "error: unknown subcommand '" << args[0] << "'\n\n" << app.help();
      return 2;
    }
  }
  std::vector<std::string> rev(args.rbegin(), args.rend());
  try {
    app.parse(rev);
  } catch (const CLI::CallForHelp&) {
    log << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    log << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    log << "error: " << e.what() << "\n\n" << app.help();
    return 2;
  }

  CLI::App* sub = app.get_subcommands().front();
  const std::string command = sub->get_name();
  try {
    const auto overrides = cli::parse_overrides(sub->remaining());
    RunConfig cfg = load_run_config(config_path, overrides);
    for (const auto& f : inputs) cfg.paths.reports.push_back(f);
    if (!inputs.empty()) cfg = parse_run_config(nlohmann::json(cfg));
    cli::Context ctx{command, std::move(cfg), nlohmann::json::object(), log};
    if (synthetic) ctx.options["synthetic"] = *synthetic;
    if (compare) ctx.options["compare"] = true;

    if (command == "ingest") cli::cmd_ingest(ctx, synthetic);
    else if (command == "stats") cli::cmd_stats(ctx);
    else if (command == "split") cli::cmd_split(ctx);
    else if (command == "pretrain") cli::cmd_pretrain(ctx);
    else if (command == "finetune") cli::cmd_finetune(ctx);
    else if (command == "ablate") cli::cmd_ablate(ctx);
    else if (command == "evaluate") cli::cmd_evaluate(ctx);
    else if (command == "build-instructions") cli::cmd_build_instructions(ctx);
    else if (command == "eval-remote") cli::cmd_eval_remote(ctx);
    else cli::cmd_report(ctx, compare);
  } catch (const UsageError& e) {
    log << "error: " << e.what() << "\n\n" << sub->help();
    return 2;
  } catch (const ConfigError& e) {
    log << "offlang " << command << ": configuration error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    log << "offlang " << command << ": " << e.what() << '\n';
    return 1;
  }
  return 0;
}

inline int run_command(int argc, const char* const* argv, std::ostream& log = std::cerr) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run_command(args, log);
}

}  // namespace offlang
