#include "offlang/encoder.hpp"

#include <cmath>
#include <limits>

#include <gtest/gtest.h>

#include "offlang/rng.hpp"
#include "offlang/training.hpp"
#include "test_util.hpp"

namespace offlang {
namespace {

struct Fixture {
  EncoderConfig cfg;
  ParameterSet ps;
  std::vector<int> ids;
  MaskedRationales masked;
};

// n tokens: [CLS] regular... [SEP]; labels alternate, nothing masked.
Fixture make_fixture(std::size_t n, std::uint64_t seed, double init_std = 0.02) {
  Fixture f;
  f.cfg = test::tiny_encoder(20);
  f.cfg.init_std = init_std;
  f.ps = init_parameters(f.cfg, seed);
  Rng rng(seed + 1);
  f.ids.push_back(Tokenizer::kCls);
  for (std::size_t i = 1; i + 1 < n; ++i) f.ids.push_back(Tokenizer::kFirstRegular + static_cast<int>(rng.below(15)));
  f.ids.push_back(Tokenizer::kSep);
  f.masked.labels.assign(n, 0);
  for (std::size_t i = 1; i + 1 < n; ++i) f.masked.labels[i] = static_cast<int>(i % 2);
  f.masked.special_positions = {0, n - 1};
  return f;
}

TEST(FuseEmbeddings, FullyMaskedIsTokenStates) {
  auto f = make_fixture(10, 3, 0.5);
  TokenAlignment al;
  al.n_tokens = 10;
  al.special_positions = {0, 9};
  MaskedRationales m = MaskedRationales::fully_masked(al);
  m.labels = f.masked.labels;
  const Mat h0 = fuse_embeddings(f.ids, m, f.ps);
  const Mat xs = token_states(f.ids, f.ps);
  EXPECT_TRUE((h0.array() == xs.array()).all());
}

TEST(FuseEmbeddings, NoMaskAllZeroLabelsAddsRowZero) {
  auto f = make_fixture(8, 4, 0.5);
  f.masked.labels.assign(8, 0);
  const Mat h0 = fuse_embeddings(f.ids, f.masked, f.ps);
  Mat expect = token_states(f.ids, f.ps);
  for (Eigen::Index i = 1; i < 7; ++i) expect.row(i) += f.ps.rationale_embedding.value.row(0);
  EXPECT_TRUE((h0.array() == expect.array()).all());
}

TEST(FuseEmbeddings, SingleUnmaskedLabelOne) {
  auto f = make_fixture(8, 5, 0.5);
  TokenAlignment al;
  al.n_tokens = 8;
  al.special_positions = {0, 7};
  MaskedRationales m = MaskedRationales::fully_masked(al);
  m.labels.assign(8, 0);
  m.labels[3] = 1;
  m.mask_positions.erase(3);
  const Mat diff = fuse_embeddings(f.ids, m, f.ps) - token_states(f.ids, f.ps);
  EXPECT_LT((diff.row(3) - f.ps.rationale_embedding.value.row(1)).cwiseAbs().maxCoeff(), 1e-12);
  for (Eigen::Index i = 0; i < 8; ++i)
    if (i != 3) EXPECT_TRUE((diff.row(i).array() == 0.0).all());
}

TEST(FuseEmbeddings, Errors) {
  auto f = make_fixture(6, 6);
  auto bad = f.masked;
  bad.labels[2] = 2;
  EXPECT_THROW(fuse_embeddings(f.ids, bad, f.ps), ValidationError);
  std::vector<int> long_ids(f.cfg.max_seq_len + 1, Tokenizer::kFirstRegular);
  MaskedRationales m;
  m.labels.assign(long_ids.size(), 0);
  EXPECT_THROW(fuse_embeddings(long_ids, m, f.ps), ValidationError);
  auto shorter = f.masked;
  shorter.labels.pop_back();
  EXPECT_THROW(fuse_embeddings(f.ids, shorter, f.ps), ValidationError);
}

TEST(ForwardMrp, ShapeAndDeterminism) {
  auto f = make_fixture(6, 7);
  const Mat h0 = fuse_embeddings(f.ids, f.masked, f.ps);
  const Mat a = forward_mrp(h0, f.ps, f.cfg.n_heads);
  const Mat b = forward_mrp(h0, f.ps, f.cfg.n_heads);
  EXPECT_EQ(a.rows(), 6);
  EXPECT_EQ(a.cols(), 2);
  EXPECT_TRUE((a.array() == b.array()).all());
}

TEST(ForwardMrp, EmptyStackIsHeadOfNormedInput) {
  auto cfg = test::tiny_encoder(20);
  cfg.n_layers = 0;
  ParameterSet ps = init_parameters(cfg, 9);
  auto f = make_fixture(6, 9);
  const Mat h0 = fuse_embeddings(f.ids, f.masked, ps);
  // With no layers only the final norm (identity gamma, zero beta at init) remains.
  Mat normed = h0;
  for (Eigen::Index i = 0; i < h0.rows(); ++i) {
    const double mean = h0.row(i).mean();
    const double var = (h0.row(i).array() - mean).square().mean();
    normed.row(i) = (h0.row(i).array() - mean) / std::sqrt(var + 1e-5);
  }
  const Mat expect = mrp_head_forward(ps, normed);
  const Mat got = forward_mrp(h0, ps, cfg.n_heads);
  EXPECT_LT((got - expect).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(ForwardMrp, NonFiniteNamesLayer) {
  auto f = make_fixture(6, 10);
  f.ps.layers[0].up.weight.value(0, 0) = std::numeric_limits<double>::quiet_NaN();
  const Mat h0 = fuse_embeddings(f.ids, f.masked, f.ps);
  try {
    forward_mrp(h0, f.ps, f.cfg.n_heads);
    FAIL() << "expected a numeric error";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("layer 0"), std::string::npos);
  }
}

TEST(ForwardClassify, MatchesFullyMaskedFusion) {
  auto f = make_fixture(7, 11, 0.3);
  TokenAlignment al;
  al.n_tokens = 7;
  al.special_positions = {0, 6};
  MaskedRationales m = MaskedRationales::fully_masked(al);
  m.labels = f.masked.labels;
  const Mat h = encode(fuse_embeddings(f.ids, m, f.ps), f.ps, f.cfg.n_heads, 0.0, {});
  const RowVec expect = classifier_head(f.ps, h);
  const RowVec got = forward_classify(f.ids, f.ps, f.cfg.n_heads);
  ASSERT_EQ(got.size(), 2);
  EXPECT_TRUE((got.array() == expect.array()).all());
}

TEST(ForwardClassify, TieGoesToNot) {
  RowVec tie(2);
  tie << 0.25, 0.25;
  EXPECT_EQ(predict_label(tie), Label::NOT);
  RowVec off(2);
  off << 1.0, 0.0;
  EXPECT_EQ(predict_label(off), Label::OFF);
  RowVec nt(2);
  nt << 0.0, 1.0;
  EXPECT_EQ(predict_label(nt), Label::NOT);
}

// Padding keys are masked out, so trailing [PAD] must not change the logits.
TEST(ForwardClassify, PaddingInvariance) {
  auto f = make_fixture(6, 12, 0.3);
  auto padded = f.ids;
  padded.insert(padded.end(), 4, Tokenizer::kPad);
  const RowVec a = forward_classify(f.ids, f.ps, f.cfg.n_heads);
  const RowVec b = forward_classify(padded, f.ps, f.cfg.n_heads);
  EXPECT_LT((a - b).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(RegisterSpecialTokens, GrowsVocabulary) {
  const Corpus c = test::small_synthetic(30);
  Tokenizer t = Tokenizer::build(c, {}, {"@USER"});
  auto cfg = test::tiny_encoder(t.size());
  ParameterSet ps = init_parameters(cfg, 1);
  const auto v = t.size();
  Rng rng(1);
  register_special_tokens(ps, t, {"@USER", "<URL>"}, rng);
  EXPECT_EQ(t.size(), v + 2);
  EXPECT_EQ(static_cast<std::size_t>(ps.token_embedding.value.rows()), v + 2);
  EXPECT_EQ(static_cast<std::size_t>(ps.mlm_head.weight.value.rows()), v + 2);
  EXPECT_EQ(t.id_of("<URL>"), static_cast<int>(v + 1));
  EXPECT_THROW(register_special_tokens(ps, t, {"<URL>"}, rng), ValidationError);
  EXPECT_THROW(register_special_tokens(ps, t, {"<A>", "<A>"}, rng), ValidationError);
}

TEST(RegisterSpecialTokens, EmptyIsNoOp) {
  Tokenizer t;
  auto cfg = test::tiny_encoder(t.size());
  ParameterSet ps = init_parameters(cfg, 1);
  const Mat before = ps.token_embedding.value;
  Rng rng(1);
  register_special_tokens(ps, t, {}, rng);
  EXPECT_EQ(t.size(), 5u);
  EXPECT_TRUE((ps.token_embedding.value.array() == before.array()).all());
}

TEST(RegisterSpecialTokens, NewRowScaleMatchesTable) {
  Tokenizer t;
  auto cfg = test::tiny_encoder(t.size());
  cfg.hidden_size = 64;
  cfg.init_std = 0.7;
  ParameterSet ps = init_parameters(cfg, 2);
  std::vector<std::string> many;
  for (int i = 0; i < 200; ++i) many.push_back("<T" + std::to_string(i) + ">");
  Rng rng(3);
  register_special_tokens(ps, t, many, rng);
  const Mat added = ps.token_embedding.value.bottomRows(200);
  const double mean = added.mean();
  const double sd = std::sqrt((added.array() - mean).square().mean());
  EXPECT_NEAR(mean, 0.0, 0.05);
  EXPECT_NEAR(sd, 0.7, 0.07);
}

// Central differences on every coordinate of the rationale table, the token
// embeddings of the ids in use and both MRP-head layers.
TEST(Gradients, MrpLossMatchesFiniteDifferences) {
  auto f = make_fixture(6, 21, 0.5);
  f.masked.mask_positions = {1, 2, 4};
  f.masked.labels = {0, 1, 0, 1, 1, 0};
  // One visible label-1 and one visible label-0 position so both rationale rows get gradient.
  auto loss = [&](ParameterSet& ps) {
    return mrp_loss(forward_mrp(fuse_embeddings(f.ids, f.masked, ps), ps, f.cfg.n_heads), f.masked);
  };
  zero_grads(f.ps);
  mrp_forward_backward(f.ps, f.cfg.n_heads, 0.0, f.ids, f.masked);

  const double h = 1e-3;
  std::size_t checked = 0, bad = 0;
  double worst = 0.0;
  auto check = [&](Param& p, Eigen::Index r, Eigen::Index c) {
    const double orig = p.value(r, c);
    p.value(r, c) = orig + h;
    const double up = loss(f.ps);
    p.value(r, c) = orig - h;
    const double down = loss(f.ps);
    p.value(r, c) = orig;
    const double numeric = (up - down) / (2 * h);
    const double analytic = p.grad(r, c);
    const double rel = std::abs(numeric - analytic) / std::max({std::abs(numeric), std::abs(analytic), 1e-6});
    worst = std::max(worst, rel);
    ++checked;
    if (rel >= 1e-3) ++bad;
  };
  auto all = [&](Param& p) {
    for (Eigen::Index r = 0; r < p.value.rows(); ++r)
      for (Eigen::Index c = 0; c < p.value.cols(); ++c) check(p, r, c);
  };
  all(f.ps.rationale_embedding);
  for (int id : f.ids)
    for (Eigen::Index c = 0; c < f.ps.token_embedding.value.cols(); ++c) check(f.ps.token_embedding, id, c);
  all(f.ps.mrp_hidden.weight);
  all(f.ps.mrp_hidden.bias);
  all(f.ps.mrp_out.weight);
  all(f.ps.mrp_out.bias);
  all(f.ps.layers[0].query.weight);
  all(f.ps.layers[0].down.weight);
  EXPECT_GT(checked, 300u);
  EXPECT_LE(static_cast<double>(bad), 0.05 * static_cast<double>(checked));
  EXPECT_LT(worst, 1e-2);
}

TEST(Gradients, MaskedRationaleRowsGetNoGradient) {
  auto f = make_fixture(6, 22, 0.5);
  TokenAlignment al;
  al.n_tokens = 6;
  al.special_positions = {0, 5};
  MaskedRationales m = MaskedRationales::fully_masked(al);
  m.labels = f.masked.labels;
  zero_grads(f.ps);
  mrp_forward_backward(f.ps, f.cfg.n_heads, 0.0, f.ids, m);
  EXPECT_EQ(f.ps.rationale_embedding.grad.cwiseAbs().maxCoeff(), 0.0);
}

TEST(Parameters, NamesAreUniqueAndInitIsSeeded) {
  const auto cfg = test::tiny_encoder(30);
  const ParameterSet a = init_parameters(cfg, 5), b = init_parameters(cfg, 5), c = init_parameters(cfg, 6);
  std::set<std::string> names;
  for_each_param(a, [&](const std::string& n, const Param&) { EXPECT_TRUE(names.insert(n).second) << n; });
  EXPECT_TRUE(names.count("layers.0.query.weight"));
  EXPECT_TRUE((a.token_embedding.value.array() == b.token_embedding.value.array()).all());
  EXPECT_FALSE((a.token_embedding.value.array() == c.token_embedding.value.array()).all());
  EXPECT_TRUE(all_finite(a));
}

TEST(EncoderConfig, Validation) {
  auto c = test::tiny_encoder(10);
  EXPECT_NO_THROW(c.validate());
  c.n_heads = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  c = test::tiny_encoder(10);
  c.max_seq_len = 1;
  EXPECT_THROW(c.validate(), ConfigError);
  c = test::tiny_encoder(10);
  nlohmann::json j = c;
  EXPECT_EQ(j.get<EncoderConfig>(), c);
}

}  // namespace
}  // namespace offlang
