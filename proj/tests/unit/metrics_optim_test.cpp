#include <cmath>

#include <gtest/gtest.h>

#include "offlang/metrics.hpp"
#include "offlang/optim.hpp"
#include "offlang/rng.hpp"
#include "test_util.hpp"

namespace offlang {
namespace {

Prf from_pr(double p, double r) { return {p, r, f1_score(p, r)}; }

struct TableRow {
  const char* name;
  double off_p, off_r, off_f1, not_p, not_r, not_f1, macro;
};

// Published per-class precision and recall with the printed F1 columns.
TEST(Metrics, PublishedRowsReproduce) {
  const TableRow rows[] = {
      {"Mistral-7b", 0.405, 0.991, 0.575, 0.550, 0.007, 0.014, 0.295},
      {"Aya101", 0.864, 0.422, 0.567, 0.707, 0.954, 0.812, 0.690},
      {"Llama-3.1-8B adapted", 0.837, 0.738, 0.785, 0.834, 0.902, 0.867, 0.826},
  };
  for (const auto& r : rows) {
    const Prf off = from_pr(r.off_p, r.off_r), nt = from_pr(r.not_p, r.not_r);
    const auto rep = aggregate(off, nt, 1, 1, 0.0);
    EXPECT_NEAR(off.f1, r.off_f1, 1e-3) << r.name;
    EXPECT_NEAR(nt.f1, r.not_f1, 1e-3) << r.name;
    EXPECT_NEAR(rep.macro_f1, r.macro, 1e-3) << r.name;
  }
}

TEST(Metrics, RoundHalfUpDisplay) {
  EXPECT_EQ(format_fixed(0.8355, 2), "0.84");
  EXPECT_EQ(format_fixed(0.825, 2), "0.83");
  EXPECT_EQ(format_fixed(0.8249, 2), "0.82");
  EXPECT_EQ(format_fixed(0.29442, 3), "0.294");
  EXPECT_EQ(format_fixed(1.0, 3), "1.000");
}

TEST(Metrics, ZeroDenominatorsAreZero) {
  // Never predicts OFF: OFF precision has an empty denominator.
  const auto rep = evaluate_labels({Label::OFF, Label::NOT, Label::NOT}, {Label::NOT, Label::NOT, Label::NOT});
  EXPECT_EQ(rep.off.precision, 0.0);
  EXPECT_EQ(rep.off.recall, 0.0);
  EXPECT_EQ(rep.off.f1, 0.0);
  EXPECT_DOUBLE_EQ(rep.not_off.recall, 1.0);
  EXPECT_EQ(f1_score(0.0, 0.0), 0.0);
  EXPECT_THROW(evaluate_labels({}, {}), ValidationError);
  EXPECT_THROW(evaluate_labels({Label::OFF}, {}), ValidationError);
}

TEST(Metrics, ConfusionCounts) {
  const auto cm = confusion({Label::OFF, Label::OFF, Label::NOT, Label::NOT, Label::NOT},
                            {Label::OFF, Label::NOT, Label::OFF, Label::NOT, Label::NOT});
  EXPECT_EQ(cm.at(Label::OFF, Label::OFF), 1u);
  EXPECT_EQ(cm.at(Label::OFF, Label::NOT), 1u);
  EXPECT_EQ(cm.at(Label::NOT, Label::OFF), 1u);
  EXPECT_EQ(cm.at(Label::NOT, Label::NOT), 2u);
  const auto rep = aggregate(cm);
  EXPECT_DOUBLE_EQ(rep.off.precision, 0.5);
  EXPECT_DOUBLE_EQ(rep.not_off.precision, 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(rep.accuracy, 0.6);
  EXPECT_EQ(rep.support_off, 2u);
  EXPECT_EQ(rep.support_not, 3u);
}

std::vector<Label> random_labels(Rng& rng, std::size_t n) {
  std::vector<Label> v(n);
  for (auto& l : v) l = rng.bernoulli(0.4) ? Label::OFF : Label::NOT;
  return v;
}

Label flip(Label l) { return l == Label::OFF ? Label::NOT : Label::OFF; }

TEST(Metrics, WeightedRecallEqualsAccuracy) {
  Rng rng(1);
  for (int t = 0; t < 200; ++t) {
    const std::size_t n = 1 + rng.below(300);
    const auto rep = evaluate_labels(random_labels(rng, n), random_labels(rng, n));
    EXPECT_EQ(rep.weighted.recall, rep.accuracy);
    EXPECT_GE(rep.macro_f1, 0.0);
    EXPECT_LE(rep.macro_f1, 1.0);
  }
}

TEST(Metrics, LabelSwapSymmetry) {
  Rng rng(2);
  for (int t = 0; t < 100; ++t) {
    const std::size_t n = 1 + rng.below(100);
    auto g = random_labels(rng, n), p = random_labels(rng, n);
    const auto a = evaluate_labels(g, p);
    for (auto& l : g) l = flip(l);
    for (auto& l : p) l = flip(l);
    const auto b = evaluate_labels(g, p);
    EXPECT_DOUBLE_EQ(a.off.f1, b.not_off.f1);
    EXPECT_DOUBLE_EQ(a.not_off.f1, b.off.f1);
    EXPECT_DOUBLE_EQ(a.macro_f1, b.macro_f1);
    EXPECT_DOUBLE_EQ(a.accuracy, b.accuracy);
  }
}

// Fixing one wrong prediction never lowers accuracy, and raises the gold
// class's recall without lowering the other class's recall.
TEST(Metrics, CorrectingAPredictionIsMonotone) {
  Rng rng(3);
  for (int t = 0; t < 200; ++t) {
    const std::size_t n = 2 + rng.below(100);
    const auto g = random_labels(rng, n);
    auto p = random_labels(rng, n);
    std::vector<std::size_t> wrong;
    for (std::size_t i = 0; i < n; ++i)
      if (g[i] != p[i]) wrong.push_back(i);
    if (wrong.empty()) continue;
    const auto before = evaluate_labels(g, p);
    const std::size_t k = wrong[rng.below(wrong.size())];
    p[k] = g[k];
    const auto after = evaluate_labels(g, p);
    EXPECT_GT(after.accuracy, before.accuracy);
    EXPECT_GT(after.of(g[k]).recall, before.of(g[k]).recall);
    EXPECT_EQ(after.of(flip(g[k])).recall, before.of(flip(g[k])).recall);
  }
}

TEST(Metrics, JsonRoundTrip) {
  const auto rep = evaluate_labels({Label::OFF, Label::NOT, Label::NOT}, {Label::OFF, Label::OFF, Label::NOT});
  const nlohmann::json j = to_json(rep);
  EXPECT_EQ(report_from_json(j), rep);
}

TEST(Metrics, RenderMarksBestAndFailed) {
  const auto good = evaluate_labels({Label::OFF, Label::NOT}, {Label::OFF, Label::NOT});
  const auto bad = evaluate_labels({Label::OFF, Label::NOT}, {Label::NOT, Label::NOT});
  const std::string text = render_report({{"alpha", bad}, {"beta", good}, {"gamma", {}, true, "boom"}}, 3);
  EXPECT_NE(text.find("* beta"), std::string::npos) << text;
  EXPECT_EQ(text.find("* alpha"), std::string::npos);
  EXPECT_NE(text.find("FAILED: boom"), std::string::npos);
  for (const char* col : {"OFFENSIVE", "NOT OFFENSIVE", "Weighted", "Macro", "Accuracy", "P", "R", "F1"})
    EXPECT_NE(text.find(col), std::string::npos) << col;
  EXPECT_THROW(render_report({}, 2), ValidationError);
}

TEST(Metrics, Comparison) {
  const auto a = evaluate_labels({Label::OFF, Label::NOT}, {Label::NOT, Label::NOT});
  const auto b = evaluate_labels({Label::OFF, Label::NOT}, {Label::OFF, Label::NOT});
  const auto d = compare_reports(a, b);
  EXPECT_DOUBLE_EQ(d["macro_f1"].get<double>(), b.macro_f1 - a.macro_f1);
  EXPECT_DOUBLE_EQ(d["accuracy"].get<double>(), 0.5);
  const std::string text = render_comparison("base", a, "ours", b, 2);
  EXPECT_NE(text.find("+0.50"), std::string::npos) << text;
}

// Independent scalar reference of the two update rules.
struct RefState {
  double m = 0, v = 0;
  long t = 0;
};

double ref_step(RefState& s, double p, double g, const OptimizerConfig& c) {
  ++s.t;
  const double lr = c.learning_rate, b1 = c.beta1, b2 = c.beta2, t = static_cast<double>(s.t);
  if (c.kind == OptimizerKind::AdamW) p -= lr * c.weight_decay * p;
  else g += c.weight_decay * p;
  s.m = b1 * s.m + (1 - b1) * g;
  s.v = b2 * s.v + (1 - b2) * g * g;
  const double bc1 = 1 - std::pow(b1, t), bc2 = 1 - std::pow(b2, t);
  const double mhat = s.m / bc1;
  if (c.kind == OptimizerKind::AdamW) return p - lr * mhat / (std::sqrt(s.v / bc2) + c.eps);
  const double rho_inf = 2 / (1 - b2) - 1;
  const double rho = rho_inf - 2 * t * std::pow(b2, t) / bc2;
  if (rho <= 5) return p - lr * mhat;
  const double r = std::sqrt((rho - 4) * (rho - 2) * rho_inf / ((rho_inf - 4) * (rho_inf - 2) * rho));
  return p - lr * mhat * r * std::sqrt(bc2) / (std::sqrt(s.v) + c.eps);
}

TEST(Optimizer, RadamFirstStepIsPlainSgdOnMomentum) {
  ParameterSet ps;
  ps.token_embedding = Param(Mat::Constant(1, 3, 1.0));
  ps.token_embedding.grad = Mat::Constant(1, 3, 0.5);
  Optimizer opt({OptimizerKind::RAdam, 0.1});
  opt.step(ps);
  EXPECT_NEAR(ps.token_embedding.value(0, 0), 1.0 - 0.1 * 0.5, 1e-15);
}

TEST(Optimizer, MatchesScalarReference) {
  for (auto kind : {OptimizerKind::RAdam, OptimizerKind::AdamW}) {
    OptimizerConfig c{kind, 0.01, 0.9, 0.999, 1e-8, 0.01};
    Optimizer opt(c);
    ParameterSet ps;
    ps.token_embedding = Param(Mat::Constant(1, 1, 0.7));
    RefState ref;
    double p = 0.7;
    Rng rng(4);
    for (int step = 0; step < 30; ++step) {
      const double g = rng.normal();
      ps.token_embedding.grad = Mat::Constant(1, 1, g);
      opt.step(ps);
      p = ref_step(ref, p, g, c);
      EXPECT_NEAR(ps.token_embedding.value(0, 0), p, 1e-9) << optimizer_name(kind) << " step " << step;
    }
  }
}

TEST(Optimizer, FrozenParametersDoNotMove) {
  ParameterSet ps;
  ps.token_embedding = Param(Mat::Constant(2, 2, 1.0));
  ps.token_embedding.grad = Mat::Constant(2, 2, 1.0);
  ps.token_embedding.trainable = false;
  Optimizer opt({OptimizerKind::AdamW, 0.5});
  opt.step(ps);
  EXPECT_TRUE((ps.token_embedding.value.array() == 1.0).all());
}

TEST(Optimizer, GradientClipping) {
  ParameterSet ps;
  ps.token_embedding = Param(Mat::Zero(1, 2));
  ps.token_embedding.grad = (Mat(1, 2) << 3.0, 4.0).finished();
  EXPECT_DOUBLE_EQ(clip_grad_norm(ps, 1.0), 5.0);
  EXPECT_NEAR(ps.token_embedding.grad.norm(), 1.0, 1e-9);
  ps.token_embedding.grad = (Mat(1, 2) << 0.3, 0.4).finished();
  clip_grad_norm(ps, 1.0);
  EXPECT_DOUBLE_EQ(ps.token_embedding.grad(0, 1), 0.4);
  EXPECT_THROW(parse_optimizer("sgd"), ConfigError);
  EXPECT_EQ(parse_optimizer("adamw"), OptimizerKind::AdamW);
}

}  // namespace
}  // namespace offlang
