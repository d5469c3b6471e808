#pragma once

// Two-stage training: an intermediate stage (masked rationale prediction, or
// masked language modeling as the ablation variant) followed by binary
// classification fine-tuning.
//
// All randomness derives from StageConfig::global_seed: the epoch shuffle from
// (seed, epoch), rationale masks and dropout from (seed, epoch, sample id).
// A run is therefore a pure function of its corpora, config and seed.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "offlang/corpus.hpp"
#include "offlang/encoder.hpp"
#include "offlang/errors.hpp"
#include "offlang/metrics.hpp"
#include "offlang/model.hpp"
#include "offlang/optim.hpp"
#include "offlang/rationale.hpp"
#include "offlang/rng.hpp"

namespace offlang {

enum class IntermediateTask { MRP, MLM, NONE };

inline std::string_view task_name(IntermediateTask t) {
  switch (t) {
    case IntermediateTask::MRP: return "MRP";
    case IntermediateTask::MLM: return "MLM";
    case IntermediateTask::NONE: return "NONE";
  }
  return "NONE";
}

inline IntermediateTask parse_task(std::string_view s) {
  if (s == "MRP" || s == "mrp") return IntermediateTask::MRP;
  if (s == "MLM" || s == "mlm") return IntermediateTask::MLM;
  if (s == "NONE" || s == "none") return IntermediateTask::NONE;
  throw ConfigError("unknown intermediate task '" + std::string(s) + "'");
}

struct StageConfig {
  double learning_rate = 2e-5;
  std::size_t batch_size = 16;
  std::size_t epochs = 5;
  OptimizerKind optimizer = OptimizerKind::RAdam;
  double mask_ratio = 0.75;  // MRP only
  double mlm_prob = 0.15;    // MLM only
  double weight_decay = 0.0;
  double max_grad_norm = 1.0;  // 0 disables clipping
  std::uint64_t global_seed = 42;
  IntermediateTask intermediate_task = IntermediateTask::MRP;
  std::optional<LoraConfig> lora;  // stage 2: adapter-only training

  void validate() const {
    if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
    if (epochs < 1) throw ConfigError("epochs must be at least 1");
    if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
    if (!(mask_ratio >= 0.0 && mask_ratio <= 1.0)) throw ConfigError("mask_ratio must lie in [0, 1]");
    if (!(mlm_prob >= 0.0 && mlm_prob <= 1.0)) throw ConfigError("mlm_prob must lie in [0, 1]");
    if (weight_decay < 0.0) throw ConfigError("weight_decay must be non-negative");
  }
};

inline void to_json(nlohmann::json& j, const StageConfig& c) {
  j = nlohmann::json{{"learning_rate", c.learning_rate},
                     {"batch_size", c.batch_size},
                     {"epochs", c.epochs},
                     {"optimizer", optimizer_name(c.optimizer)},
                     {"mask_ratio", c.mask_ratio},
                     {"mlm_prob", c.mlm_prob},
                     {"weight_decay", c.weight_decay},
                     {"max_grad_norm", c.max_grad_norm},
                     {"global_seed", c.global_seed},
                     {"intermediate_task", task_name(c.intermediate_task)},
                     {"lora", c.lora ? nlohmann::json(*c.lora) : nlohmann::json(nullptr)}};
}

inline void from_json(const nlohmann::json& j, StageConfig& c) {
  StageConfig d;
  c.learning_rate = j.value("learning_rate", d.learning_rate);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.epochs = j.value("epochs", d.epochs);
  c.optimizer = parse_optimizer(j.value("optimizer", std::string(optimizer_name(d.optimizer))));
  c.mask_ratio = j.value("mask_ratio", d.mask_ratio);
  c.mlm_prob = j.value("mlm_prob", d.mlm_prob);
  c.weight_decay = j.value("weight_decay", d.weight_decay);
  c.max_grad_norm = j.value("max_grad_norm", d.max_grad_norm);
  c.global_seed = j.value("global_seed", d.global_seed);
  c.intermediate_task = parse_task(j.value("intermediate_task", std::string(task_name(d.intermediate_task))));
  if (j.contains("lora") && !j["lora"].is_null()) c.lora = j["lora"].get<LoraConfig>();
  else c.lora.reset();
}

// ---------------------------------------------------------------------------
// Losses

// Log-softmax cross-entropy of one logit row against `target`; writes
// d(loss)/d(logits) scaled by `weight` into grad when given.
inline double cross_entropy_row(const Eigen::Ref<const RowVec>& logits, int target, double weight = 1.0,
                                RowVec* grad = nullptr) {
  const double mx = logits.maxCoeff();
  RowVec e = (logits.array() - mx).exp().matrix();
  const double sum = e.sum();
  const double loss = -(logits(target) - mx - std::log(sum));
  if (grad) {
    *grad = weight * (e / sum);
    (*grad)(target) -= weight;
  }
  return loss;
}

// Mean cross-entropy over masked positions only; 0 without masked positions.
inline double mrp_loss(const Mat& logits, const MaskedRationales& targets) {
  if (static_cast<std::size_t>(logits.rows()) != targets.labels.size())
    throw ValidationError("logit rows and rationale labels differ in length");
  if (targets.mask_positions.empty()) return 0.0;
  double total = 0.0;
  for (auto i : targets.mask_positions)
    total += cross_entropy_row(logits.row(static_cast<Eigen::Index>(i)), targets.labels[i]);
  return total / static_cast<double>(targets.mask_positions.size());
}

// Sum of masked-position cross-entropies times `scale`, with the matching
// logit gradient.
inline double mrp_loss_grad(const Mat& logits, const MaskedRationales& targets, double scale, Mat& dlogits) {
  dlogits = Mat::Zero(logits.rows(), logits.cols());
  double total = 0.0;
  for (auto i : targets.mask_positions) {
    const auto r = static_cast<Eigen::Index>(i);
    RowVec g(logits.cols());
    total += cross_entropy_row(logits.row(r), targets.labels[i], scale, &g);
    dlogits.row(r) = g;
  }
  return total * scale;
}

// Forward and backward of the masked rationale objective for one sequence.
// Parameter gradients of mean-over-masked loss times `weight` accumulate
// into ps; returns the unweighted mean loss.
inline double mrp_forward_backward(ParameterSet& ps, std::size_t n_heads, double dropout, const std::vector<int>& ids,
                                   const MaskedRationales& masked, double weight = 1.0, Rng* dropout_rng = nullptr) {
  const Mat h0 = fuse_embeddings(ids, masked, ps);
  EncodeCache cache;
  const ForwardOptions opt{dropout_rng != nullptr, dropout_rng};
  const Mat h = encode(h0, ps, n_heads, dropout, detail::valid_keys(ids, ids.size()), opt, &cache);
  MrpHeadCache head;
  const Mat logits = mrp_head_forward(ps, h, &head);
  const double loss = mrp_loss(logits, masked);
  if (masked.mask_positions.empty()) return loss;
  Mat dlogits;
  mrp_loss_grad(logits, masked, weight / static_cast<double>(masked.mask_positions.size()), dlogits);
  const Mat dh = mrp_head_backward(ps, head, dlogits);
  const Mat dh0 = encode_backward(ps, cache, n_heads, dh);
  embeddings_backward(ps, ids, &masked, dh0);
  return loss;
}

// ---------------------------------------------------------------------------
// Masked language modeling corruption

struct MlmBranches {
  double mask = 0.8;    // replace with [MASK]
  double random = 0.1;  // replace with a random regular token; remainder unchanged
};

struct MlmExample {
  std::vector<int> ids;               // corrupted
  std::vector<std::size_t> targets;   // selected positions, ascending
  std::vector<int> originals;         // original ids at targets
};

inline MlmExample mlm_corrupt(const std::vector<int>& ids, const std::set<std::size_t>& special_positions, double prob,
                              std::size_t vocab_size, Rng& rng, const MlmBranches& branches = {}) {
  if (!(prob >= 0.0 && prob <= 1.0)) throw ConfigError("MLM probability must lie in [0, 1]");
  MlmExample ex{ids, {}, {}};
  const auto n_regular = vocab_size > static_cast<std::size_t>(Tokenizer::kFirstRegular)
                             ? vocab_size - static_cast<std::size_t>(Tokenizer::kFirstRegular)
                             : 0;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (special_positions.count(i)) continue;
    if (!rng.bernoulli(prob)) continue;
    ex.targets.push_back(i);
    ex.originals.push_back(ids[i]);
    const double u = rng.uniform();
    if (u < branches.mask) {
      ex.ids[i] = Tokenizer::kMask;
    } else if (u < branches.mask + branches.random && n_regular > 0) {
      ex.ids[i] = Tokenizer::kFirstRegular + static_cast<int>(rng.below(n_regular));
    }
  }
  return ex;
}

inline double mlm_forward_backward(ParameterSet& ps, std::size_t n_heads, double dropout, const MlmExample& ex,
                                   double weight, Rng* dropout_rng = nullptr) {
  if (ex.targets.empty()) return 0.0;
  const Mat h0 = token_states(ex.ids, ps);
  EncodeCache cache;
  const ForwardOptions opt{dropout_rng != nullptr, dropout_rng};
  const Mat h = encode(h0, ps, n_heads, dropout, detail::valid_keys(ex.ids, ex.ids.size()), opt, &cache);
  Mat rows(static_cast<Eigen::Index>(ex.targets.size()), h.cols());
  for (std::size_t k = 0; k < ex.targets.size(); ++k) rows.row(static_cast<Eigen::Index>(k)) = h.row(static_cast<Eigen::Index>(ex.targets[k]));
  detail::LinearCache lc;
  const Mat logits = detail::linear_forward(ps.mlm_head, rows, ForwardOptions{}, &lc);
  const double scale = weight / static_cast<double>(ex.targets.size());
  Mat dlogits(logits.rows(), logits.cols());
  double total = 0.0;
  for (Eigen::Index k = 0; k < logits.rows(); ++k) {
    RowVec g(logits.cols());
    total += cross_entropy_row(logits.row(k), ex.originals[static_cast<std::size_t>(k)], scale, &g);
    dlogits.row(k) = g;
  }
  const Mat drows = detail::linear_backward(ps.mlm_head, lc, dlogits);
  Mat dh = Mat::Zero(h.rows(), h.cols());
  for (std::size_t k = 0; k < ex.targets.size(); ++k)
    dh.row(static_cast<Eigen::Index>(ex.targets[k])) += drows.row(static_cast<Eigen::Index>(k));
  const Mat dh0 = encode_backward(ps, cache, n_heads, dh);
  embeddings_backward(ps, ex.ids, nullptr, dh0);
  return total / static_cast<double>(ex.targets.size());
}

// Mean MLM loss over target positions, evaluation mode.
inline double mlm_loss(const ParameterSet& ps, std::size_t n_heads, const MlmExample& ex) {
  if (ex.targets.empty()) return 0.0;
  const Mat h = encode(token_states(ex.ids, ps), ps, n_heads, 0.0, detail::valid_keys(ex.ids, ex.ids.size()));
  double total = 0.0;
  for (std::size_t k = 0; k < ex.targets.size(); ++k) {
    const Mat row = h.row(static_cast<Eigen::Index>(ex.targets[k]));
    const Mat logits = detail::linear_forward(ps.mlm_head, row, ForwardOptions{}, nullptr);
    total += cross_entropy_row(logits.row(0), ex.originals[k]);
  }
  return total / static_cast<double>(ex.targets.size());
}

// Two-class cross-entropy on the [CLS] logits for one sequence.
inline double classify_forward_backward(ParameterSet& ps, std::size_t n_heads, double dropout,
                                        const std::vector<int>& ids, Label gold, double weight,
                                        Rng* dropout_rng = nullptr) {
  const Mat h0 = token_states(ids, ps);
  EncodeCache cache;
  const ForwardOptions opt{dropout_rng != nullptr, dropout_rng};
  const Mat h = encode(h0, ps, n_heads, dropout, detail::valid_keys(ids, ids.size()), opt, &cache);
  detail::LinearCache lc;
  const Mat first = h.topRows(1);
  const Mat logits = detail::linear_forward(ps.classifier, first, ForwardOptions{}, &lc);
  RowVec g(2);
  const double loss = cross_entropy_row(logits.row(0), static_cast<int>(gold), weight, &g);
  const Mat dfirst = detail::linear_backward(ps.classifier, lc, Mat(g));
  Mat dh = Mat::Zero(h.rows(), h.cols());
  dh.row(0) = dfirst.row(0);
  const Mat dh0 = encode_backward(ps, cache, n_heads, dh);
  embeddings_backward(ps, ids, nullptr, dh0);
  return loss;
}

// ---------------------------------------------------------------------------
// Evaluation

inline std::vector<Label> predict(const Model& m, const Corpus& c) {
  std::vector<Label> out;
  out.reserve(c.size());
  for (const auto& s : c.samples)
    out.push_back(predict_label(forward_classify(m.encode(s).ids, m.params, m.config.n_heads)));
  return out;
}

inline std::vector<Label> gold_labels(const Corpus& c) {
  std::vector<Label> out;
  out.reserve(c.size());
  for (const auto& s : c.samples) out.push_back(s.label);
  return out;
}

inline ConfusionMatrix evaluate_confusion(const Model& m, const Corpus& c) { return confusion(gold_labels(c), predict(m, c)); }

inline MetricsReport evaluate(const Model& m, const Corpus& c) { return aggregate(evaluate_confusion(m, c)); }

// ---------------------------------------------------------------------------
// Training runs

struct EpochStats {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_metric = 0.0;  // validation loss (stage 1) or macro-F1 (stage 2)
};

struct StageResult {
  Model model;  // best checkpoint by the stage's selection metric
  CheckpointManifest manifest;
  std::vector<EpochStats> history;
};

struct Stage2Result {
  Model model;
  CheckpointManifest manifest;
  std::vector<EpochStats> history;
  MetricsReport test_report;
  ConfusionMatrix test_confusion;
};

namespace detail {

struct Prepared {
  std::string id;
  std::vector<int> ids;
  TokenRationales rationales;
  Label label = Label::NOT;
};

inline std::vector<Prepared> prepare(const Model& m, const Corpus& c) {
  std::vector<Prepared> out;
  out.reserve(c.size());
  for (const auto& s : c.samples) {
    const Encoding e = m.encode(s);
    out.push_back({s.id, e.ids, align_rationales(s, e.alignment), s.label});
  }
  return out;
}

constexpr std::uint64_t kValidationEpoch = 0xFFFFFFFFull;

inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(derive_seed(seed, {tag("epoch-shuffle"), epoch}));
  rng.shuffle(order);
  return order;
}

inline Rng dropout_rng(std::uint64_t seed, std::uint64_t epoch, const std::string& id) {
  return Rng(derive_seed(seed, {tag("dropout"), epoch, fnv1a(id)}));
}

inline Rng mlm_rng(std::uint64_t seed, std::uint64_t epoch, const std::string& id) {
  return Rng(derive_seed(seed, {tag("mlm-corrupt"), epoch, fnv1a(id)}));
}

[[noreturn]] inline void abort_non_finite(std::size_t epoch, std::size_t batch, double loss,
                                          const std::vector<EpochStats>& history) {
  std::ostringstream os;
  os << "non-finite training loss " << loss << " at epoch " << epoch << ", batch " << batch << "; epoch losses so far:";
  for (const auto& h : history) os << ' ' << h.train_loss;
  throw NumericError(os.str());
}

inline void set_all_trainable(ParameterSet& ps) {
  for_each_param(ps, [](const std::string&, Param& p) { p.trainable = true; });
}

inline double intermediate_val_loss(const Model& m, const std::vector<Prepared>& val, const StageConfig& cfg) {
  if (val.empty()) return 0.0;
  double total = 0.0;
  std::size_t count = 0;
  for (const auto& p : val) {
    if (cfg.intermediate_task == IntermediateTask::MRP) {
      Rng rng = mask_rng(cfg.global_seed, kValidationEpoch, p.id);
      const auto masked = mask_rationales(p.rationales, cfg.mask_ratio, rng);
      if (masked.mask_positions.empty()) continue;
      const Mat h0 = fuse_embeddings(p.ids, masked, m.params);
      const Mat logits = forward_mrp(h0, m.params, m.config.n_heads, valid_keys(p.ids, p.ids.size()));
      total += mrp_loss(logits, masked) * static_cast<double>(masked.mask_positions.size());
      count += masked.mask_positions.size();
    } else {
      Rng rng = mlm_rng(cfg.global_seed, kValidationEpoch, p.id);
      const auto ex = mlm_corrupt(p.ids, p.rationales.special_positions, cfg.mlm_prob, m.config.vocab_size, rng);
      if (ex.targets.empty()) continue;
      total += mlm_loss(m.params, m.config.n_heads, ex) * static_cast<double>(ex.targets.size());
      count += ex.targets.size();
    }
  }
  return count ? total / static_cast<double>(count) : 0.0;
}

}  // namespace detail

// Intermediate stage (MRP or MLM). Saves epoch-<k>/ and best/ checkpoints
// under out_dir when it is non-empty; the best checkpoint minimizes the
// validation loss of the same objective.
inline StageResult run_stage1(const Corpus& train, const Corpus& val, const StageConfig& cfg, Model model,
                              const std::filesystem::path& out_dir = {}) {
  cfg.validate();
  if (cfg.intermediate_task == IntermediateTask::NONE)
    throw ConfigError("stage 1 needs an intermediate task (MRP or MLM)");
  if (train.empty()) throw ValidationError("stage 1 needs a non-empty training corpus");
  detail::set_all_trainable(model.params);
  const auto train_set = detail::prepare(model, train);
  const auto val_set = detail::prepare(model, val);
  const std::size_t heads = model.config.n_heads;
  const double dropout = model.config.dropout;
  Optimizer opt({cfg.optimizer, cfg.learning_rate, 0.9, 0.999, 1e-8, cfg.weight_decay});
  const nlohmann::json cfg_json = cfg;
  const std::string metric = cfg.intermediate_task == IntermediateTask::MRP ? "val_mrp_loss" : "val_mlm_loss";

  StageResult result;
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto order = detail::epoch_order(train_set.size(), cfg.global_seed, epoch);
    double epoch_loss = 0.0;
    std::size_t epoch_targets = 0;
    for (std::size_t start = 0, batch = 0; start < order.size(); start += cfg.batch_size, ++batch) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      zero_grads(model.params);
      double batch_loss = 0.0;
      std::size_t batch_targets = 0;
      if (cfg.intermediate_task == IntermediateTask::MRP) {
        std::vector<MaskedRationales> masks;
        for (std::size_t k = start; k < end; ++k) {
          const auto& p = train_set[order[k]];
          Rng rng = mask_rng(cfg.global_seed, epoch, p.id);
          masks.push_back(mask_rationales(p.rationales, cfg.mask_ratio, rng));
          batch_targets += masks.back().mask_positions.size();
        }
        if (batch_targets == 0) continue;
        for (std::size_t k = start; k < end; ++k) {
          const auto& p = train_set[order[k]];
          const auto& m = masks[k - start];
          const double w = static_cast<double>(m.mask_positions.size()) / static_cast<double>(batch_targets);
          Rng drng = detail::dropout_rng(cfg.global_seed, epoch, p.id);
          batch_loss += w * mrp_forward_backward(model.params, heads, dropout, p.ids, m, w, dropout > 0 ? &drng : nullptr);
        }
      } else {
        std::vector<MlmExample> exs;
        for (std::size_t k = start; k < end; ++k) {
          const auto& p = train_set[order[k]];
          Rng rng = detail::mlm_rng(cfg.global_seed, epoch, p.id);
          exs.push_back(mlm_corrupt(p.ids, p.rationales.special_positions, cfg.mlm_prob, model.config.vocab_size, rng));
          batch_targets += exs.back().targets.size();
        }
        if (batch_targets == 0) continue;
        for (std::size_t k = start; k < end; ++k) {
          const auto& ex = exs[k - start];
          const double w = static_cast<double>(ex.targets.size()) / static_cast<double>(batch_targets);
          Rng drng = detail::dropout_rng(cfg.global_seed, epoch, train_set[order[k]].id);
          batch_loss += w * mlm_forward_backward(model.params, heads, dropout, ex, w, dropout > 0 ? &drng : nullptr);
        }
      }
      if (!std::isfinite(batch_loss)) detail::abort_non_finite(epoch, batch, batch_loss, result.history);
      clip_grad_norm(model.params, cfg.max_grad_norm);
      opt.step(model.params);
      epoch_loss += batch_loss * static_cast<double>(batch_targets);
      epoch_targets += batch_targets;
    }
    EpochStats st{epoch + 1, epoch_targets ? epoch_loss / static_cast<double>(epoch_targets) : 0.0,
                  detail::intermediate_val_loss(model, val_set, cfg)};
    result.history.push_back(st);
    CheckpointManifest man{"stage1", "", epoch + 1, metric, st.val_metric, "", cfg_json, ""};
    man.config_hash = checkpoint_config_hash(model, cfg_json);
    if (!out_dir.empty()) {
      save_checkpoint(out_dir / ("epoch-" + std::to_string(epoch + 1)), model, man);
    }
    if (st.val_metric < best || epoch == 0) {
      best = st.val_metric;
      result.model = model;
      result.manifest = man;
      if (!out_dir.empty()) {
        save_checkpoint(out_dir / "best", model, man);
        result.manifest.path = (out_dir / "best").string();
      }
    }
  }
  return result;
}

// The model classification fine-tuning starts from: the stage-1 model when
// given (architecture must match), else the base model; a fresh classifier
// head; adapters attached when the config asks for them.
inline Model initial_stage2_model(const Model& base, const Model* init, const StageConfig& cfg) {
  if (init && !same_architecture(init->config, base.config))
    throw ValidationError("stage-1 checkpoint architecture does not match the configured encoder");
  if (init && init->tokenizer.pieces() != base.tokenizer.pieces())
    throw ValidationError("stage-1 checkpoint vocabulary does not match the base model");
  Model m = init ? *init : base;
  m.lora.reset();
  detail::set_all_trainable(m.params);
  for (auto& layer : m.params.layers)
    for (Linear* lin : {&layer.query, &layer.key, &layer.value, &layer.output, &layer.gate, &layer.up, &layer.down})
      lin->lora.reset();
  reset_classifier(m.params, m.config.init_std, cfg.global_seed);
  if (cfg.lora) {
    m.params = apply_lora(m.params, *cfg.lora, cfg.global_seed);
    m.lora = cfg.lora;
  }
  return m;
}

// Classification fine-tuning. The best epoch by validation macro-F1 is kept
// (earliest on ties) and evaluated on the test corpus.
inline Stage2Result run_stage2(const Corpus& train, const Corpus& val, const Corpus& test, const StageConfig& cfg,
                               const Model& base, const Model* init = nullptr,
                               const std::filesystem::path& out_dir = {}) {
  cfg.validate();
  if (train.empty()) throw ValidationError("stage 2 needs a non-empty training corpus");
  Model model = initial_stage2_model(base, init, cfg);
  const auto train_set = detail::prepare(model, train);
  const std::size_t heads = model.config.n_heads;
  const double dropout = model.config.dropout;
  Optimizer opt({cfg.optimizer, cfg.learning_rate, 0.9, 0.999, 1e-8, cfg.weight_decay});
  nlohmann::json cfg_json = cfg;
  cfg_json["init"] = init ? "stage1" : "base";

  const std::uint64_t seed = derive_seed(cfg.global_seed, {tag("stage2")});
  Stage2Result result;
  double best = -1.0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto order = detail::epoch_order(train_set.size(), seed, epoch);
    double epoch_loss = 0.0;
    for (std::size_t start = 0, batch = 0; start < order.size(); start += cfg.batch_size, ++batch) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      zero_grads(model.params);
      const double w = 1.0 / static_cast<double>(end - start);
      double batch_loss = 0.0;
      for (std::size_t k = start; k < end; ++k) {
        const auto& p = train_set[order[k]];
        Rng drng = detail::dropout_rng(seed, epoch, p.id);
        batch_loss += w * classify_forward_backward(model.params, heads, dropout, p.ids, p.label, w,
                                                    dropout > 0 ? &drng : nullptr);
      }
      if (!std::isfinite(batch_loss)) detail::abort_non_finite(epoch, batch, batch_loss, result.history);
      clip_grad_norm(model.params, cfg.max_grad_norm);
      opt.step(model.params);
      epoch_loss += batch_loss * static_cast<double>(end - start);
    }
    EpochStats st{epoch + 1, epoch_loss / static_cast<double>(train_set.size()),
                  val.empty() ? 0.0 : evaluate(model, val).macro_f1};
    result.history.push_back(st);
    CheckpointManifest man{"stage2", "", epoch + 1, "val_macro_f1", st.val_metric, "", cfg_json, ""};
    man.config_hash = checkpoint_config_hash(model, cfg_json);
    if (!out_dir.empty()) save_checkpoint(out_dir / ("epoch-" + std::to_string(epoch + 1)), model, man);
    if (st.val_metric > best) {
      best = st.val_metric;
      result.model = model;
      result.manifest = man;
      if (!out_dir.empty()) {
        save_checkpoint(out_dir / "best", model, man);
        result.manifest.path = (out_dir / "best").string();
      }
    }
  }
  if (!test.empty()) {
    result.test_confusion = evaluate_confusion(result.model, test);
    result.test_report = aggregate(result.test_confusion);
  }
  return result;
}

}  // namespace offlang
