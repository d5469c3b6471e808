#pragma once

// Transformer encoder with a fused rationale channel.
//
// Input states are H0 = X^S + X~R where X^S is token plus positional
// embedding and X~R holds the rationale-embedding row of each visible label,
// or the zero vector for masked and special positions. Layers are pre-norm:
//
//   X1 = X  + Dropout(Attn(LN1(X)))
//   X2 = X1 + Dropout(Down(gelu(Gate(LN2(X1))) * Up(LN2(X1))))
//
// followed by a final LayerNorm. Heads read the final states: a two-layer
// perceptron predicting rationale labels at every position, a binary
// classifier on the [CLS] position, and a vocabulary projection used by the
// masked-language-model variant.
//
// Every projection is a Linear that may carry a low-rank adapter
// W + (alpha / r) B A. Backward passes are written out by hand and accumulate
// into Param::grad of trainable parameters only.

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "offlang/errors.hpp"
#include "offlang/rationale.hpp"
#include "offlang/rng.hpp"
#include "offlang/tensor.hpp"
#include "offlang/tokenizer.hpp"

namespace offlang {

struct EncoderConfig {
  std::size_t n_layers = 2;
  std::size_t hidden_size = 32;
  std::size_t n_heads = 2;
  std::size_t ff_size = 64;
  std::size_t vocab_size = 0;  // filled from the tokenizer when 0
  std::size_t max_seq_len = 64;
  double dropout = 0.1;
  double init_std = 0.02;
  std::size_t n_rationale_classes = 2;

  bool operator==(const EncoderConfig&) const = default;

  void validate() const {
    if (n_heads == 0 || hidden_size == 0 || hidden_size % n_heads != 0)
      throw ConfigError("hidden_size must be a positive multiple of n_heads");
    if (max_seq_len < 2) throw ConfigError("max_seq_len must be at least 2");
    if (ff_size == 0) throw ConfigError("ff_size must be positive");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must lie in [0, 1)");
    if (n_rationale_classes != 2) throw ConfigError("n_rationale_classes is fixed at 2");
  }
};

inline void to_json(nlohmann::json& j, const EncoderConfig& c) {
  j = nlohmann::json{{"n_layers", c.n_layers},   {"hidden_size", c.hidden_size},
                     {"n_heads", c.n_heads},     {"ff_size", c.ff_size},
                     {"vocab_size", c.vocab_size}, {"max_seq_len", c.max_seq_len},
                     {"dropout", c.dropout},     {"init_std", c.init_std},
                     {"n_rationale_classes", c.n_rationale_classes}};
}

inline void from_json(const nlohmann::json& j, EncoderConfig& c) {
  EncoderConfig d;
  c.n_layers = j.value("n_layers", d.n_layers);
  c.hidden_size = j.value("hidden_size", d.hidden_size);
  c.n_heads = j.value("n_heads", d.n_heads);
  c.ff_size = j.value("ff_size", d.ff_size);
  c.vocab_size = j.value("vocab_size", d.vocab_size);
  c.max_seq_len = j.value("max_seq_len", d.max_seq_len);
  c.dropout = j.value("dropout", d.dropout);
  c.init_std = j.value("init_std", d.init_std);
  c.n_rationale_classes = j.value("n_rationale_classes", d.n_rationale_classes);
}

// ---------------------------------------------------------------------------
// Parameters

struct LoraAdapter {
  Param a;  // r x in
  Param b;  // out x r
  double scale = 1.0;
  double dropout = 0.0;
};

struct Linear {
  Param weight;  // out x in
  Param bias;    // 1 x out
  std::optional<LoraAdapter> lora;

  std::size_t in_dim() const { return static_cast<std::size_t>(weight.value.cols()); }
  std::size_t out_dim() const { return static_cast<std::size_t>(weight.value.rows()); }
};

struct LayerNormParams {
  Param gamma;
  Param beta;
};

struct EncoderLayer {
  LayerNormParams attn_norm;
  Linear query, key, value, output;
  LayerNormParams ffn_norm;
  Linear gate, up, down;
};

struct ParameterSet {
  Param token_embedding;      // vocab x d
  Param position_embedding;   // max_seq_len x d
  Param rationale_embedding;  // 2 x d
  std::vector<EncoderLayer> layers;
  LayerNormParams final_norm;
  Linear mrp_hidden;  // d -> d
  Linear mrp_out;     // d -> 2
  Linear classifier;  // d -> 2
  Linear mlm_head;    // d -> vocab
};

namespace detail {

template <typename L, typename F>
void visit_linear(const std::string& name, L& lin, F& f) {
  f(name + ".weight", lin.weight);
  f(name + ".bias", lin.bias);
  if (lin.lora) {
    f(name + ".lora_a", lin.lora->a);
    f(name + ".lora_b", lin.lora->b);
  }
}

template <typename N, typename F>
void visit_norm(const std::string& name, N& ln, F& f) {
  f(name + ".gamma", ln.gamma);
  f(name + ".beta", ln.beta);
}

}  // namespace detail

// Calls f(name, param) for every parameter in a fixed order.
template <typename PS, typename F>
void for_each_param(PS& ps, F&& f) {
  f(std::string("token_embedding"), ps.token_embedding);
  f(std::string("position_embedding"), ps.position_embedding);
  f(std::string("rationale_embedding"), ps.rationale_embedding);
  for (std::size_t l = 0; l < ps.layers.size(); ++l) {
    auto& layer = ps.layers[l];
    const std::string p = "layers." + std::to_string(l) + ".";
    detail::visit_norm(p + "attn_norm", layer.attn_norm, f);
    detail::visit_linear(p + "query", layer.query, f);
    detail::visit_linear(p + "key", layer.key, f);
    detail::visit_linear(p + "value", layer.value, f);
    detail::visit_linear(p + "output", layer.output, f);
    detail::visit_norm(p + "ffn_norm", layer.ffn_norm, f);
    detail::visit_linear(p + "gate", layer.gate, f);
    detail::visit_linear(p + "up", layer.up, f);
    detail::visit_linear(p + "down", layer.down, f);
  }
  detail::visit_norm("final_norm", ps.final_norm, f);
  detail::visit_linear("mrp_hidden", ps.mrp_hidden, f);
  detail::visit_linear("mrp_out", ps.mrp_out, f);
  detail::visit_linear("classifier", ps.classifier, f);
  detail::visit_linear("mlm_head", ps.mlm_head, f);
}

inline void zero_grads(ParameterSet& ps) {
  for_each_param(ps, [](const std::string&, Param& p) { p.zero_grad(); });
}

inline std::size_t count_trainable(const ParameterSet& ps) {
  std::size_t n = 0;
  for_each_param(ps, [&](const std::string&, const Param& p) {
    if (p.trainable) n += static_cast<std::size_t>(p.value.size());
  });
  return n;
}

inline bool all_finite(const ParameterSet& ps) {
  bool ok = true;
  for_each_param(ps, [&](const std::string&, const Param& p) { ok = ok && p.value.allFinite(); });
  return ok;
}

namespace detail {

inline Mat normal_matrix(std::size_t rows, std::size_t cols, double stddev, Rng& rng) {
  Mat m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal(0.0, stddev);
  return m;
}

inline Linear make_linear(std::size_t in, std::size_t out, double stddev, Rng& rng) {
  Linear l;
  l.weight = Param(normal_matrix(out, in, stddev, rng));
  l.bias = Param(Mat::Zero(1, static_cast<Eigen::Index>(out)));
  return l;
}

inline LayerNormParams make_norm(std::size_t d) {
  return {Param(Mat::Ones(1, static_cast<Eigen::Index>(d))), Param(Mat::Zero(1, static_cast<Eigen::Index>(d)))};
}

}  // namespace detail

// Weights ~ N(0, init_std^2) drawn in visiting order from a stream derived
// from seed; biases and LayerNorm shifts are 0, LayerNorm gains are 1.
inline ParameterSet init_parameters(const EncoderConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  if (cfg.vocab_size < Tokenizer::kFirstRegular) throw ConfigError("vocab_size is smaller than the reserved entries");
  Rng rng(derive_seed(seed, {tag("encoder-init")}));
  const double s = cfg.init_std;
  const std::size_t d = cfg.hidden_size;
  ParameterSet ps;
  ps.token_embedding = Param(detail::normal_matrix(cfg.vocab_size, d, s, rng));
  ps.position_embedding = Param(detail::normal_matrix(cfg.max_seq_len, d, s, rng));
  ps.rationale_embedding = Param(detail::normal_matrix(2, d, s, rng));
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    EncoderLayer layer;
    layer.attn_norm = detail::make_norm(d);
    layer.query = detail::make_linear(d, d, s, rng);
    layer.key = detail::make_linear(d, d, s, rng);
    layer.value = detail::make_linear(d, d, s, rng);
    layer.output = detail::make_linear(d, d, s, rng);
    layer.ffn_norm = detail::make_norm(d);
    layer.gate = detail::make_linear(d, cfg.ff_size, s, rng);
    layer.up = detail::make_linear(d, cfg.ff_size, s, rng);
    layer.down = detail::make_linear(cfg.ff_size, d, s, rng);
    ps.layers.push_back(std::move(layer));
  }
  ps.final_norm = detail::make_norm(d);
  ps.mrp_hidden = detail::make_linear(d, d, s, rng);
  ps.mrp_out = detail::make_linear(d, cfg.n_rationale_classes, s, rng);
  ps.classifier = detail::make_linear(d, 2, s, rng);
  ps.mlm_head = detail::make_linear(d, cfg.vocab_size, s, rng);
  return ps;
}

// Fresh classifier head, as at the start of classification fine-tuning.
inline void reset_classifier(ParameterSet& ps, double init_std, std::uint64_t seed) {
  Rng rng(derive_seed(seed, {tag("classifier-init")}));
  const auto d = static_cast<std::size_t>(ps.classifier.weight.value.cols());
  ps.classifier = detail::make_linear(d, 2, init_std, rng);
}

// Grows the vocabulary and embedding table by one row per token. New rows are
// drawn from N(0, s^2) with s the standard deviation of all existing
// embedding entries. The vocabulary-sized output head grows alongside.
inline void register_special_tokens(ParameterSet& ps, Tokenizer& tokenizer, const std::vector<std::string>& tokens,
                                    Rng& rng) {
  std::set<std::string> seen;
  for (const auto& t : tokens) {
    if (tokenizer.contains(t) || !seen.insert(t).second)
      throw ValidationError("special token '" + t + "' is already registered");
  }
  if (tokens.empty()) return;
  const Mat& e = ps.token_embedding.value;
  const double mean = e.mean();
  const double var = (e.array() - mean).square().sum() / static_cast<double>(e.size());
  const double s = std::sqrt(var);
  const double head_std = std::sqrt((ps.mlm_head.weight.value.array() - ps.mlm_head.weight.value.mean()).square().mean());
  const Eigen::Index old_rows = e.rows();
  const auto add = static_cast<Eigen::Index>(tokens.size());
  auto grow = [&](Param& p, double stddev) {
    Mat grown(p.value.rows() + add, p.value.cols());
    grown.topRows(p.value.rows()) = p.value;
    for (Eigen::Index r = p.value.rows(); r < grown.rows(); ++r)
      for (Eigen::Index c = 0; c < grown.cols(); ++c) grown(r, c) = stddev > 0 ? rng.normal(0.0, stddev) : 0.0;
    p.value = std::move(grown);
    if (p.grad.size()) p.zero_grad();
  };
  grow(ps.token_embedding, s);
  grow(ps.mlm_head.weight, head_std);
  Mat bias(1, old_rows + add);
  bias.setZero();
  bias.leftCols(old_rows) = ps.mlm_head.bias.value;
  ps.mlm_head.bias.value = std::move(bias);
  if (ps.mlm_head.bias.grad.size()) ps.mlm_head.bias.zero_grad();
  for (const auto& t : tokens) tokenizer.add(t);
}

// ---------------------------------------------------------------------------
// Low-rank adapters

struct LoraConfig {
  std::size_t rank = 16;
  double alpha = 16.0;
  double dropout = 0.0;
  std::vector<std::string> targets = {"query", "key", "value", "output", "gate", "up", "down"};

  double scale() const { return alpha / static_cast<double>(rank); }
};

inline void to_json(nlohmann::json& j, const LoraConfig& c) {
  j = nlohmann::json{{"rank", c.rank}, {"alpha", c.alpha}, {"dropout", c.dropout}, {"targets", c.targets}};
}

inline void from_json(const nlohmann::json& j, LoraConfig& c) {
  LoraConfig d;
  c.rank = j.value("rank", d.rank);
  c.alpha = j.value("alpha", d.alpha);
  c.dropout = j.value("dropout", d.dropout);
  c.targets = j.value("targets", d.targets);
}

namespace detail {

// Accepts the short projection names and the *_proj spellings.
inline std::string canonical_projection(std::string name) {
  static const std::vector<std::pair<std::string, std::string>> aliases = {
      {"q_proj", "query"}, {"k_proj", "key"},       {"v_proj", "value"},     {"o_proj", "output"},
      {"gate_proj", "gate"}, {"up_proj", "up"}, {"down_proj", "down"}};
  for (const auto& [alias, canon] : aliases)
    if (name == alias) return canon;
  return name;
}

inline Linear* projection(EncoderLayer& layer, const std::string& name) {
  if (name == "query") return &layer.query;
  if (name == "key") return &layer.key;
  if (name == "value") return &layer.value;
  if (name == "output") return &layer.output;
  if (name == "gate") return &layer.gate;
  if (name == "up") return &layer.up;
  if (name == "down") return &layer.down;
  return nullptr;
}

}  // namespace detail

// Freezes every base parameter and attaches adapters to the targeted
// projections of every layer: A ~ U(-1/sqrt(in), 1/sqrt(in)), B = 0.
inline ParameterSet apply_lora(const ParameterSet& base, const LoraConfig& cfg, std::uint64_t seed) {
  if (cfg.rank < 1) throw ConfigError("LoRA rank must be at least 1");
  if (!(cfg.alpha > 0.0)) throw ConfigError("LoRA alpha must be positive");
  if (!(cfg.dropout >= 0.0 && cfg.dropout < 1.0)) throw ConfigError("LoRA dropout must lie in [0, 1)");
  std::vector<std::string> targets;
  for (const auto& t : cfg.targets) {
    auto c = detail::canonical_projection(t);
    EncoderLayer probe;
    if (!detail::projection(probe, c)) throw ConfigError("unknown projection '" + t + "'");
    targets.push_back(std::move(c));
  }
  ParameterSet ps = base;
  for_each_param(ps, [](const std::string&, Param& p) { p.trainable = false; });
  Rng rng(derive_seed(seed, {tag("lora-init")}));
  for (auto& layer : ps.layers)
    for (const auto& t : targets) {
      Linear* lin = detail::projection(layer, t);
      if (lin->lora) continue;
      const auto in = static_cast<Eigen::Index>(lin->in_dim());
      const auto out = static_cast<Eigen::Index>(lin->out_dim());
      const auto r = static_cast<Eigen::Index>(cfg.rank);
      const double bound = 1.0 / std::sqrt(static_cast<double>(in));
      LoraAdapter ad;
      ad.a = Param(Mat(r, in));
      for (Eigen::Index i = 0; i < ad.a.value.size(); ++i) ad.a.value.data()[i] = rng.uniform(-bound, bound);
      ad.b = Param(Mat::Zero(out, r));
      ad.scale = cfg.scale();
      ad.dropout = cfg.dropout;
      lin->lora = std::move(ad);
    }
  return ps;
}

// Closed form: sum over adapted projections of r * (in + out).
inline std::size_t lora_parameter_count(const EncoderConfig& enc, const LoraConfig& cfg) {
  std::size_t per_layer = 0;
  const std::size_t d = enc.hidden_size, f = enc.ff_size;
  std::set<std::string> seen;
  for (const auto& t : cfg.targets) {
    const auto c = detail::canonical_projection(t);
    if (!seen.insert(c).second) continue;
    if (c == "gate" || c == "up") per_layer += cfg.rank * (d + f);
    else if (c == "down") per_layer += cfg.rank * (f + d);
    else per_layer += cfg.rank * (d + d);
  }
  return per_layer * enc.n_layers;
}

// ---------------------------------------------------------------------------
// Forward and backward passes

struct ForwardOptions {
  bool training = false;
  Rng* rng = nullptr;  // dropout stream, required when training with dropout > 0
};

namespace detail {

inline Mat dropout_mask(Eigen::Index rows, Eigen::Index cols, double p, const ForwardOptions& opt) {
  if (!opt.training || p <= 0.0 || !opt.rng) return Mat();
  Mat m(rows, cols);
  const double keep = 1.0 / (1.0 - p);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = opt.rng->uniform() < p ? 0.0 : keep;
  return m;
}

inline void apply_mask(Mat& x, const Mat& mask) {
  if (mask.size()) x.array() *= mask.array();
}

struct LinearCache {
  Mat input;
  Mat lora_input;   // input after adapter dropout
  Mat lora_hidden;  // lora_input * A^T
  Mat lora_mask;
};

inline Mat linear_forward(const Linear& lin, const Mat& x, const ForwardOptions& opt, LinearCache* cache) {
  Mat y = x * lin.weight.value.transpose();
  y.rowwise() += lin.bias.value.row(0);
  if (lin.lora) {
    Mat mask = dropout_mask(x.rows(), x.cols(), lin.lora->dropout, opt);
    Mat xin = x;
    apply_mask(xin, mask);
    Mat z = xin * lin.lora->a.value.transpose();
    y.noalias() += lin.lora->scale * (z * lin.lora->b.value.transpose());
    if (cache) {
      cache->lora_input = std::move(xin);
      cache->lora_hidden = std::move(z);
      cache->lora_mask = std::move(mask);
    }
  }
  if (cache) cache->input = x;
  return y;
}

inline Mat linear_backward(Linear& lin, const LinearCache& c, const Mat& dy) {
  if (lin.weight.trainable) {
    lin.weight.ensure_grad();
    lin.weight.grad.noalias() += dy.transpose() * c.input;
  }
  if (lin.bias.trainable) {
    lin.bias.ensure_grad();
    lin.bias.grad.row(0) += dy.colwise().sum();
  }
  Mat dx = dy * lin.weight.value;
  if (lin.lora) {
    auto& ad = *lin.lora;
    if (ad.b.trainable) {
      ad.b.ensure_grad();
      ad.b.grad.noalias() += ad.scale * (dy.transpose() * c.lora_hidden);
    }
    Mat dz = ad.scale * (dy * ad.b.value);
    if (ad.a.trainable) {
      ad.a.ensure_grad();
      ad.a.grad.noalias() += dz.transpose() * c.lora_input;
    }
    Mat dxin = dz * ad.a.value;
    apply_mask(dxin, c.lora_mask);
    dx += dxin;
  }
  return dx;
}

constexpr double kNormEps = 1e-5;

struct NormCache {
  Mat xhat;
  Eigen::VectorXd inv_std;
};

inline Mat norm_forward(const LayerNormParams& ln, const Mat& x, NormCache* cache) {
  const auto n = x.rows();
  const double d = static_cast<double>(x.cols());
  Mat xhat(n, x.cols());
  Eigen::VectorXd inv(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double mu = x.row(i).sum() / d;
    const double var = (x.row(i).array() - mu).square().sum() / d;
    inv(i) = 1.0 / std::sqrt(var + kNormEps);
    xhat.row(i) = (x.row(i).array() - mu) * inv(i);
  }
  Mat y = xhat.array().rowwise() * ln.gamma.value.row(0).array();
  y.rowwise() += ln.beta.value.row(0);
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->inv_std = std::move(inv);
  }
  return y;
}

inline Mat norm_backward(LayerNormParams& ln, const NormCache& c, const Mat& dy) {
  if (ln.gamma.trainable) {
    ln.gamma.ensure_grad();
    ln.gamma.grad.row(0) += (dy.array() * c.xhat.array()).colwise().sum().matrix();
  }
  if (ln.beta.trainable) {
    ln.beta.ensure_grad();
    ln.beta.grad.row(0) += dy.colwise().sum();
  }
  Mat dxhat = dy.array().rowwise() * ln.gamma.value.row(0).array();
  const double d = static_cast<double>(dy.cols());
  Mat dx(dy.rows(), dy.cols());
  for (Eigen::Index i = 0; i < dy.rows(); ++i) {
    const double m1 = dxhat.row(i).sum() / d;
    const double m2 = dxhat.row(i).dot(c.xhat.row(i)) / d;
    dx.row(i) = c.inv_std(i) * (dxhat.row(i).array() - m1 - c.xhat.row(i).array() * m2);
  }
  return dx;
}

struct LayerCache {
  NormCache attn_norm;
  LinearCache q, k, v, o;
  Mat Q, K, V;
  std::vector<Mat> probs;  // per head, n x n
  Mat attn_drop;
  NormCache ffn_norm;
  LinearCache gate, up, down;
  Mat G, U;
  Mat ffn_drop;
};

}  // namespace detail

struct EncodeCache {
  Mat embed_drop;
  std::vector<detail::LayerCache> layers;
  detail::NormCache final_norm;
  std::vector<bool> key_valid;
};

namespace detail {

inline Mat layer_forward(const EncoderLayer& layer, const Mat& x, std::size_t n_heads, double dropout,
                         const std::vector<bool>& key_valid, const ForwardOptions& opt, LayerCache* c) {
  const auto n = x.rows();
  const auto d = x.cols();
  const auto dh = d / static_cast<Eigen::Index>(n_heads);
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  Mat a = norm_forward(layer.attn_norm, x, c ? &c->attn_norm : nullptr);
  Mat q = linear_forward(layer.query, a, opt, c ? &c->q : nullptr);
  Mat k = linear_forward(layer.key, a, opt, c ? &c->k : nullptr);
  Mat v = linear_forward(layer.value, a, opt, c ? &c->v : nullptr);
  Mat heads(n, d);
  if (c) c->probs.clear();
  for (std::size_t h = 0; h < n_heads; ++h) {
    const auto off = static_cast<Eigen::Index>(h) * dh;
    Mat s = q.middleCols(off, dh) * k.middleCols(off, dh).transpose() * scale;
    for (Eigen::Index i = 0; i < n; ++i) {
      double mx = -INFINITY;
      for (Eigen::Index j = 0; j < n; ++j)
        if (key_valid[static_cast<std::size_t>(j)]) mx = std::max(mx, s(i, j));
      double sum = 0.0;
      for (Eigen::Index j = 0; j < n; ++j) {
        const double e = key_valid[static_cast<std::size_t>(j)] ? std::exp(s(i, j) - mx) : 0.0;
        s(i, j) = e;
        sum += e;
      }
      s.row(i) /= sum;
    }
    heads.middleCols(off, dh) = s * v.middleCols(off, dh);
    if (c) c->probs.push_back(std::move(s));
  }
  Mat attn = linear_forward(layer.output, heads, opt, c ? &c->o : nullptr);
  Mat attn_drop = dropout_mask(n, d, dropout, opt);
  apply_mask(attn, attn_drop);
  Mat x1 = x + attn;

  Mat b = norm_forward(layer.ffn_norm, x1, c ? &c->ffn_norm : nullptr);
  Mat g = linear_forward(layer.gate, b, opt, c ? &c->gate : nullptr);
  Mat u = linear_forward(layer.up, b, opt, c ? &c->up : nullptr);
  Mat m = g.unaryExpr([](double t) { return gelu(t); }).cwiseProduct(u);
  Mat f = linear_forward(layer.down, m, opt, c ? &c->down : nullptr);
  Mat ffn_drop = dropout_mask(n, d, dropout, opt);
  apply_mask(f, ffn_drop);
  if (c) {
    c->Q = std::move(q);
    c->K = std::move(k);
    c->V = std::move(v);
    c->attn_drop = std::move(attn_drop);
    c->G = std::move(g);
    c->U = std::move(u);
    c->ffn_drop = std::move(ffn_drop);
  }
  return x1 + f;
}

inline Mat layer_backward(EncoderLayer& layer, const LayerCache& c, std::size_t n_heads, const Mat& dout) {
  const auto d = dout.cols();
  const auto dh = d / static_cast<Eigen::Index>(n_heads);
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  // Feed-forward branch.
  Mat df = dout;
  apply_mask(df, c.ffn_drop);
  Mat dm = linear_backward(layer.down, c.down, df);
  Mat dg = dm.cwiseProduct(c.U).cwiseProduct(c.G.unaryExpr([](double t) { return gelu_grad(t); }));
  Mat du = dm.cwiseProduct(c.G.unaryExpr([](double t) { return gelu(t); }));
  Mat db = linear_backward(layer.gate, c.gate, dg);
  db += linear_backward(layer.up, c.up, du);
  Mat dx1 = dout + norm_backward(layer.ffn_norm, c.ffn_norm, db);

  // Attention branch.
  Mat dattn = dx1;
  apply_mask(dattn, c.attn_drop);
  Mat dheads = linear_backward(layer.output, c.o, dattn);
  Mat dq(dout.rows(), d), dk(dout.rows(), d), dv(dout.rows(), d);
  for (std::size_t h = 0; h < n_heads; ++h) {
    const auto off = static_cast<Eigen::Index>(h) * dh;
    const Mat& p = c.probs[h];
    const Mat dho = dheads.middleCols(off, dh);
    Mat dp = dho * c.V.middleCols(off, dh).transpose();
    dv.middleCols(off, dh) = p.transpose() * dho;
    Eigen::VectorXd row_dot = (dp.array() * p.array()).rowwise().sum();
    Mat ds = p.array() * (dp.colwise() - row_dot).array();
    dq.middleCols(off, dh) = ds * c.K.middleCols(off, dh) * scale;
    dk.middleCols(off, dh) = ds.transpose() * c.Q.middleCols(off, dh) * scale;
  }
  Mat da = linear_backward(layer.query, c.q, dq);
  da += linear_backward(layer.key, c.k, dk);
  da += linear_backward(layer.value, c.v, dv);
  return dx1 + norm_backward(layer.attn_norm, c.attn_norm, da);
}

inline std::vector<bool> valid_keys(const std::vector<int>& ids, std::size_t n) {
  std::vector<bool> v(n, true);
  for (std::size_t i = 0; i < ids.size() && i < n; ++i) v[i] = ids[i] != Tokenizer::kPad;
  return v;
}

}  // namespace detail

// X^S: token embedding plus positional embedding for each position.
inline Mat token_states(const std::vector<int>& ids, const ParameterSet& ps) {
  const auto n = static_cast<Eigen::Index>(ids.size());
  if (n > ps.position_embedding.value.rows())
    throw ValidationError("sequence of length " + std::to_string(n) + " exceeds max_seq_len " +
                          std::to_string(ps.position_embedding.value.rows()));
  Mat xs(n, ps.token_embedding.value.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    const int id = ids[static_cast<std::size_t>(i)];
    if (id < 0 || id >= ps.token_embedding.value.rows())
      throw ValidationError("token id " + std::to_string(id) + " is outside the vocabulary");
    xs.row(i) = ps.token_embedding.value.row(id) + ps.position_embedding.value.row(i);
  }
  return xs;
}

// H0 = X^S + X~R. Masked and special positions contribute the zero vector.
inline Mat fuse_embeddings(const std::vector<int>& ids, const MaskedRationales& masked, const ParameterSet& ps) {
  if (ids.size() != masked.labels.size())
    throw ValidationError("token ids and rationale labels differ in length");
  Mat h = token_states(ids, ps);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const int label = masked.labels[i];
    if (label != 0 && label != 1) throw ValidationError("rationale label " + std::to_string(label) + " is not 0 or 1");
    if (!masked.zeroed(i)) h.row(static_cast<Eigen::Index>(i)) += ps.rationale_embedding.value.row(label);
  }
  return h;
}

// Runs the layer stack and final norm. key_valid marks attendable positions
// (empty means all).
inline Mat encode(const Mat& h0, const ParameterSet& ps, std::size_t n_heads, double dropout,
                  std::vector<bool> key_valid, const ForwardOptions& opt = {}, EncodeCache* cache = nullptr) {
  if (key_valid.empty()) key_valid.assign(static_cast<std::size_t>(h0.rows()), true);
  if (!h0.allFinite()) throw NumericError("non-finite values in the fused input embeddings");
  Mat x = h0;
  Mat drop = detail::dropout_mask(x.rows(), x.cols(), dropout, opt);
  detail::apply_mask(x, drop);
  if (cache) {
    cache->embed_drop = std::move(drop);
    cache->layers.assign(ps.layers.size(), {});
    cache->key_valid = key_valid;
  }
  for (std::size_t l = 0; l < ps.layers.size(); ++l) {
    x = detail::layer_forward(ps.layers[l], x, n_heads, dropout, key_valid, opt, cache ? &cache->layers[l] : nullptr);
    if (!x.allFinite()) throw NumericError("non-finite activations after encoder layer " + std::to_string(l));
  }
  Mat out = detail::norm_forward(ps.final_norm, x, cache ? &cache->final_norm : nullptr);
  if (!out.allFinite()) throw NumericError("non-finite activations after the final norm");
  return out;
}

// Gradient of the loss with respect to H0, given its gradient with respect to
// the encoder output. Parameter gradients accumulate along the way.
inline Mat encode_backward(ParameterSet& ps, const EncodeCache& cache, std::size_t n_heads, const Mat& dout) {
  Mat dx = detail::norm_backward(ps.final_norm, cache.final_norm, dout);
  for (std::size_t l = ps.layers.size(); l-- > 0;) dx = detail::layer_backward(ps.layers[l], cache.layers[l], n_heads, dx);
  detail::apply_mask(dx, cache.embed_drop);
  return dx;
}

// Scatters dH0 into token, positional and (for visible labels) rationale
// embedding gradients.
inline void embeddings_backward(ParameterSet& ps, const std::vector<int>& ids, const MaskedRationales* masked,
                                const Mat& dh0) {
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    if (ps.token_embedding.trainable) {
      ps.token_embedding.ensure_grad();
      ps.token_embedding.grad.row(ids[i]) += dh0.row(r);
    }
    if (ps.position_embedding.trainable) {
      ps.position_embedding.ensure_grad();
      ps.position_embedding.grad.row(r) += dh0.row(r);
    }
    if (masked && !masked->zeroed(i) && ps.rationale_embedding.trainable) {
      ps.rationale_embedding.ensure_grad();
      ps.rationale_embedding.grad.row(masked->labels[i]) += dh0.row(r);
    }
  }
}

struct MrpHeadCache {
  detail::LinearCache hidden, out;
  Mat pre;
};

inline Mat mrp_head_forward(const ParameterSet& ps, const Mat& h, MrpHeadCache* c = nullptr) {
  const ForwardOptions eval;
  Mat pre = detail::linear_forward(ps.mrp_hidden, h, eval, c ? &c->hidden : nullptr);
  Mat act = pre.unaryExpr([](double t) { return gelu(t); });
  if (c) c->pre = pre;
  return detail::linear_forward(ps.mrp_out, act, eval, c ? &c->out : nullptr);
}

inline Mat mrp_head_backward(ParameterSet& ps, const MrpHeadCache& c, const Mat& dlogits) {
  Mat dact = detail::linear_backward(ps.mrp_out, c.out, dlogits);
  Mat dpre = dact.cwiseProduct(c.pre.unaryExpr([](double t) { return gelu_grad(t); }));
  return detail::linear_backward(ps.mrp_hidden, c.hidden, dpre);
}

// Per-position rationale logits (n x 2), evaluation mode.
inline Mat forward_mrp(const Mat& h0, const ParameterSet& ps, std::size_t n_heads,
                       const std::vector<bool>& key_valid = {}) {
  return mrp_head_forward(ps, encode(h0, ps, n_heads, 0.0, key_valid));
}

// Classifier logits for {OFF, NOT} read from the [CLS] position, with the
// rationale channel fully zero.
inline RowVec classifier_head(const ParameterSet& ps, const Mat& h) {
  Mat first = h.topRows(1);
  Mat y = detail::linear_forward(ps.classifier, first, ForwardOptions{}, nullptr);
  return y.row(0);
}

inline RowVec forward_classify(const std::vector<int>& ids, const ParameterSet& ps, std::size_t n_heads) {
  const Mat h0 = token_states(ids, ps);
  return classifier_head(ps, encode(h0, ps, n_heads, 0.0, detail::valid_keys(ids, ids.size())));
}

// argmax over {OFF, NOT}; ties go to NOT.
inline Label predict_label(const RowVec& logits) { return logits(0) > logits(1) ? Label::OFF : Label::NOT; }

}  // namespace offlang
