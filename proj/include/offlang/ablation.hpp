#pragma once

// Ablation grid: one arm per MRP mask ratio, one per MLM probability and an
// arm without an intermediate stage. Every arm starts from the same base
// model and shares all other hyper-parameters. With several seeds, an arm's
// reported metrics come from the confusion matrix pooled over seeds.

#include <atomic>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "offlang/corpus.hpp"
#include "offlang/metrics.hpp"
#include "offlang/model.hpp"
#include "offlang/training.hpp"

namespace offlang {

struct AblationSpec {
  std::vector<double> mrp_ratios = {0.25, 0.5, 0.75, 1.0};
  std::vector<double> mlm_probs = {0.15, 0.5};
  bool include_no_intermediate = true;
  std::vector<std::uint64_t> seeds;  // empty: the stage configs' global seed

  bool empty() const { return mrp_ratios.empty() && mlm_probs.empty() && !include_no_intermediate; }
};

inline void to_json(nlohmann::json& j, const AblationSpec& s) {
  j = nlohmann::json{{"mrp_ratios", s.mrp_ratios},
                     {"mlm_probs", s.mlm_probs},
                     {"include_no_intermediate", s.include_no_intermediate},
                     {"seeds", s.seeds}};
}

inline void from_json(const nlohmann::json& j, AblationSpec& s) {
  AblationSpec d;
  s.mrp_ratios = j.value("mrp_ratios", d.mrp_ratios);
  s.mlm_probs = j.value("mlm_probs", d.mlm_probs);
  s.include_no_intermediate = j.value("include_no_intermediate", d.include_no_intermediate);
  s.seeds = j.value("seeds", d.seeds);
}

struct AblationArm {
  std::string label;
  IntermediateTask task = IntermediateTask::NONE;
  double value = 0.0;  // mask ratio or MLM probability
};

inline std::string fraction_label(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

inline std::vector<AblationArm> ablation_arms(const AblationSpec& spec) {
  std::vector<AblationArm> arms;
  for (double r : spec.mrp_ratios) arms.push_back({"Mask Ratio = " + fraction_label(r), IntermediateTask::MRP, r});
  for (double p : spec.mlm_probs) arms.push_back({"Mask Prob = " + fraction_label(p), IntermediateTask::MLM, p});
  if (spec.include_no_intermediate) arms.push_back({"No Intermediate Task", IntermediateTask::NONE, 0.0});
  return arms;
}

struct AblationBase {
  EncoderConfig encoder;
  StageConfig stage1;
  StageConfig stage2;
  TokenizerOptions tokenizer;
  std::optional<Model> pretrained;  // replaces the seeded base initialization
};

struct ArmResult {
  AblationArm arm;
  bool failed = false;
  std::string error;
  MetricsReport report;
  ConfusionMatrix pooled;
  std::vector<std::uint64_t> seeds;
  std::vector<double> seed_macro_f1;
};

struct AblationReport {
  std::vector<ArmResult> arms;
};

inline ArmResult run_ablation_arm(const Corpus& train, const Corpus& val, const Corpus& test, const AblationArm& arm,
                                  const std::vector<std::uint64_t>& seeds, const AblationBase& base) {
  ArmResult res;
  res.arm = arm;
  res.seeds = seeds;
  try {
    if (!(arm.value >= 0.0 && arm.value <= 1.0)) throw ConfigError("arm fraction must lie in [0, 1]");
    for (auto seed : seeds) {
      Model model = base.pretrained ? *base.pretrained : make_base_model(train, base.encoder, seed, base.tokenizer);
      StageConfig s2 = base.stage2;
      s2.global_seed = seed;
      Stage2Result out;
      if (arm.task == IntermediateTask::NONE) {
        out = run_stage2(train, val, test, s2, model);
      } else {
        StageConfig s1 = base.stage1;
        s1.global_seed = seed;
        s1.intermediate_task = arm.task;
        if (arm.task == IntermediateTask::MRP) s1.mask_ratio = arm.value;
        else s1.mlm_prob = arm.value;
        const StageResult pre = run_stage1(train, val, s1, model);
        out = run_stage2(train, val, test, s2, model, &pre.model);
      }
      res.pooled += out.test_confusion;
      res.seed_macro_f1.push_back(out.test_report.macro_f1);
    }
    res.report = aggregate(res.pooled);
  } catch (const std::exception& e) {
    res.failed = true;
    res.error = e.what();
  }
  return res;
}

// Arms run on up to `parallel` threads; each arm is an isolated run and the
// report keeps arm order regardless of completion order.
inline AblationReport run_ablation_suite(const Corpus& train, const Corpus& val, const Corpus& test,
                                         const AblationSpec& spec, const AblationBase& base,
                                         std::size_t parallel = 1) {
  if (spec.empty()) throw ConfigError("ablation spec has no arms");
  const auto arms = ablation_arms(spec);
  std::vector<std::uint64_t> seeds = spec.seeds;
  if (seeds.empty()) seeds.push_back(base.stage2.global_seed);
  AblationReport report;
  report.arms.resize(arms.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < arms.size(); i = next++)
      report.arms[i] = run_ablation_arm(train, val, test, arms[i], seeds, base);
  };
  const std::size_t n_threads = std::max<std::size_t>(1, std::min(parallel, arms.size()));
  if (n_threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < n_threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  return report;
}

inline nlohmann::ordered_json to_json(const AblationReport& r) {
  nlohmann::ordered_json j;
  j["arms"] = nlohmann::ordered_json::array();
  for (const auto& a : r.arms) {
    nlohmann::ordered_json arm;
    arm["label"] = a.arm.label;
    arm["task"] = task_name(a.arm.task);
    arm["value"] = a.arm.value;
    arm["failed"] = a.failed;
    if (a.failed) arm["error"] = a.error;
    arm["seeds"] = a.seeds;
    arm["seed_macro_f1"] = a.seed_macro_f1;
    arm["metrics"] = a.failed ? nlohmann::ordered_json(nullptr) : to_json(a.report);
    j["arms"].push_back(std::move(arm));
  }
  return j;
}

inline std::string render_ablation(const AblationReport& r, int places) {
  std::vector<NamedReport> rows;
  for (const auto& a : r.arms) rows.push_back({a.arm.label, a.report, a.failed, a.error});
  return render_report(rows, places);
}

}  // namespace offlang
