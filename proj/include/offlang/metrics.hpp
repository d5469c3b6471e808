#pragma once

// Binary classification metrics over {OFF, NOT} and their tabular rendering.
// Precision, recall and F1 are 0 whenever their denominator is 0.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "offlang/corpus.hpp"
#include "offlang/errors.hpp"

namespace offlang {

struct ConfusionMatrix {
  // counts[gold][pred], indexed by Label (OFF = 0, NOT = 1).
  std::array<std::array<std::uint64_t, 2>, 2> counts{};

  std::uint64_t at(Label gold, Label pred) const {
    return counts[static_cast<int>(gold)][static_cast<int>(pred)];
  }
  std::uint64_t total() const { return counts[0][0] + counts[0][1] + counts[1][0] + counts[1][1]; }
  std::uint64_t support(Label l) const { return counts[static_cast<int>(l)][0] + counts[static_cast<int>(l)][1]; }

  ConfusionMatrix& operator+=(const ConfusionMatrix& o) {
    for (int i = 0; i < 2; ++i)
      for (int j = 0; j < 2; ++j) counts[i][j] += o.counts[i][j];
    return *this;
  }
  bool operator==(const ConfusionMatrix&) const = default;
};

inline ConfusionMatrix confusion(const std::vector<Label>& gold, const std::vector<Label>& pred) {
  if (gold.size() != pred.size())
    throw ValidationError("gold and predicted label sequences differ in length (" + std::to_string(gold.size()) +
                          " vs " + std::to_string(pred.size()) + ")");
  if (gold.empty()) throw ValidationError("cannot build a confusion matrix from no labels");
  ConfusionMatrix cm;
  for (std::size_t i = 0; i < gold.size(); ++i) ++cm.counts[static_cast<int>(gold[i])][static_cast<int>(pred[i])];
  return cm;
}

struct Prf {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;

  bool operator==(const Prf&) const = default;
};

inline double safe_div(double a, double b) { return b == 0.0 ? 0.0 : a / b; }

inline double f1_score(double p, double r) { return safe_div(2.0 * p * r, p + r); }

inline Prf prf(const ConfusionMatrix& cm, Label cls) {
  const Label other = cls == Label::OFF ? Label::NOT : Label::OFF;
  const auto tp = static_cast<double>(cm.at(cls, cls));
  const auto fp = static_cast<double>(cm.at(other, cls));
  const auto fn = static_cast<double>(cm.at(cls, other));
  Prf r;
  r.precision = safe_div(tp, tp + fp);
  r.recall = safe_div(tp, tp + fn);
  r.f1 = f1_score(r.precision, r.recall);
  return r;
}

struct MetricsReport {
  Prf off;
  Prf not_off;
  Prf weighted;
  double macro_f1 = 0.0;
  double accuracy = 0.0;
  std::uint64_t support_off = 0;
  std::uint64_t support_not = 0;

  const Prf& of(Label l) const { return l == Label::OFF ? off : not_off; }
  bool operator==(const MetricsReport&) const = default;
};

// Combines per-class scores: macro-F1 is their plain mean, weighted scores are
// support-weighted means.
inline MetricsReport aggregate(const Prf& off, const Prf& not_off, std::uint64_t support_off,
                               std::uint64_t support_not, double accuracy) {
  MetricsReport r;
  r.off = off;
  r.not_off = not_off;
  r.support_off = support_off;
  r.support_not = support_not;
  r.macro_f1 = 0.5 * (off.f1 + not_off.f1);
  const double so = static_cast<double>(support_off), sn = static_cast<double>(support_not);
  const double n = so + sn;
  r.weighted.precision = safe_div(so * off.precision + sn * not_off.precision, n);
  r.weighted.recall = safe_div(so * off.recall + sn * not_off.recall, n);
  r.weighted.f1 = safe_div(so * off.f1 + sn * not_off.f1, n);
  r.accuracy = accuracy;
  return r;
}

inline MetricsReport aggregate(const ConfusionMatrix& cm) {
  if (cm.total() == 0) throw ValidationError("cannot aggregate an empty confusion matrix");
  const double acc =
      static_cast<double>(cm.at(Label::OFF, Label::OFF) + cm.at(Label::NOT, Label::NOT)) / static_cast<double>(cm.total());
  MetricsReport r = aggregate(prf(cm, Label::OFF), prf(cm, Label::NOT), cm.support(Label::OFF), cm.support(Label::NOT), acc);
  // Support-weighted recall is (TP_off + TP_not) / n; use the same expression
  // so it matches accuracy bit for bit.
  r.weighted.recall = acc;
  return r;
}

inline MetricsReport evaluate_labels(const std::vector<Label>& gold, const std::vector<Label>& pred) {
  return aggregate(confusion(gold, pred));
}

// Round half up at `places` decimals. The 1e-9 nudge absorbs binary
// representation error so 0.8355 rounds to 0.84.
inline double round_half_up(double x, int places) {
  const double scale = std::pow(10.0, places);
  return std::floor(x * scale + 0.5 + 1e-9) / scale;
}

inline std::string format_fixed(double x, int places) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", places, round_half_up(x, places));
  return buf;
}

inline nlohmann::ordered_json to_json(const Prf& p) {
  return {{"precision", p.precision}, {"recall", p.recall}, {"f1", p.f1}};
}

inline Prf prf_from_json(const nlohmann::json& j) {
  return {j.at("precision").get<double>(), j.at("recall").get<double>(), j.at("f1").get<double>()};
}

inline nlohmann::ordered_json to_json(const MetricsReport& r) {
  nlohmann::ordered_json j;
  j["OFF"] = to_json(r.off);
  j["NOT"] = to_json(r.not_off);
  j["weighted"] = to_json(r.weighted);
  j["macro_f1"] = r.macro_f1;
  j["accuracy"] = r.accuracy;
  j["support"] = {{"OFF", r.support_off}, {"NOT", r.support_not}};
  return j;
}

inline MetricsReport report_from_json(const nlohmann::json& j) {
  MetricsReport r;
  r.off = prf_from_json(j.at("OFF"));
  r.not_off = prf_from_json(j.at("NOT"));
  r.weighted = prf_from_json(j.at("weighted"));
  r.macro_f1 = j.at("macro_f1").get<double>();
  r.accuracy = j.at("accuracy").get<double>();
  r.support_off = j.at("support").at("OFF").get<std::uint64_t>();
  r.support_not = j.at("support").at("NOT").get<std::uint64_t>();
  return r;
}

struct NamedReport {
  std::string name;
  MetricsReport report;
  bool failed = false;  // rendered as a placeholder row
  std::string error;
};

namespace detail {

inline std::vector<double> report_cells(const MetricsReport& r) {
  return {r.off.precision, r.off.recall, r.off.f1,
          r.not_off.precision, r.not_off.recall, r.not_off.f1,
          r.weighted.precision, r.weighted.recall, r.weighted.f1,
          r.macro_f1};
}

inline std::string pad(const std::string& s, std::size_t w) { return s.size() >= w ? s : s + std::string(w - s.size(), ' '); }

inline std::string lpad(const std::string& s, std::size_t w) { return s.size() >= w ? s : std::string(w - s.size(), ' ') + s; }

}  // namespace detail

// Aligned text table: OFF P/R/F1, NOT P/R/F1, weighted P/R/F1, macro-F1 and
// accuracy. The row(s) with the highest displayed macro-F1 are marked '*'.
inline std::string render_report(const std::vector<NamedReport>& rows, int places) {
  if (rows.empty()) throw ValidationError("nothing to render");
  double best = -1.0;
  for (const auto& r : rows)
    if (!r.failed) best = std::max(best, round_half_up(r.report.macro_f1, places));
  std::size_t name_w = 13;
  for (const auto& r : rows) name_w = std::max(name_w, r.name.size());
  const std::size_t cw = static_cast<std::size_t>(places) + 4;
  std::ostringstream os;
  os << "  " << detail::pad("Configuration", name_w) << " | " << detail::pad("OFFENSIVE", 3 * cw) << " | "
     << detail::pad("NOT OFFENSIVE", 3 * cw) << " | " << detail::pad("Weighted", 3 * cw) << " | "
     << detail::pad("Macro", cw) << " | " << "Accuracy\n";
  os << "  " << detail::pad("", name_w);
  for (int g = 0; g < 3; ++g) os << " | " << detail::lpad("P", cw) << detail::lpad("R", cw) << detail::lpad("F1", cw);
  os << " | " << detail::lpad("F1", cw) << " | " << detail::lpad("", cw) << "\n";
  for (const auto& r : rows) {
    if (r.failed) {
      os << "  " << detail::pad(r.name, name_w) << " | FAILED: " << r.error << "\n";
      continue;
    }
    const bool is_best = round_half_up(r.report.macro_f1, places) == best;
    os << (is_best ? "* " : "  ") << detail::pad(r.name, name_w);
    const auto cells = detail::report_cells(r.report);
    for (std::size_t g = 0; g < 3; ++g) {
      os << " | ";
      for (std::size_t k = 0; k < 3; ++k) os << detail::lpad(format_fixed(cells[g * 3 + k], places), cw);
    }
    os << " | " << detail::lpad(format_fixed(r.report.macro_f1, places), cw) << " | "
       << detail::lpad(format_fixed(r.report.accuracy, places), cw) << "\n";
  }
  return os.str();
}

// Per-cell deltas (b - a) between two reports.
inline nlohmann::ordered_json compare_reports(const MetricsReport& a, const MetricsReport& b) {
  auto delta = [](const Prf& x, const Prf& y) {
    return nlohmann::ordered_json{
        {"precision", y.precision - x.precision}, {"recall", y.recall - x.recall}, {"f1", y.f1 - x.f1}};
  };
  nlohmann::ordered_json j;
  j["OFF"] = delta(a.off, b.off);
  j["NOT"] = delta(a.not_off, b.not_off);
  j["weighted"] = delta(a.weighted, b.weighted);
  j["macro_f1"] = b.macro_f1 - a.macro_f1;
  j["accuracy"] = b.accuracy - a.accuracy;
  return j;
}

inline std::string render_comparison(const std::string& name_a, const MetricsReport& a, const std::string& name_b,
                                     const MetricsReport& b, int places) {
  std::ostringstream os;
  const char* labels[] = {"OFF P", "OFF R", "OFF F1", "NOT P", "NOT R", "NOT F1", "W P", "W R", "W F1", "Macro F1"};
  const auto ca = detail::report_cells(a), cb = detail::report_cells(b);
  const std::size_t w = std::max<std::size_t>({10, name_a.size(), name_b.size()});
  os << detail::pad("metric", 10) << " " << detail::lpad(name_a, w) << " " << detail::lpad(name_b, w) << " "
     << detail::lpad("delta", w) << "\n";
  for (std::size_t i = 0; i < ca.size(); ++i) {
    const double d = cb[i] - ca[i];
    os << detail::pad(labels[i], 10) << " " << detail::lpad(format_fixed(ca[i], places), w) << " "
       << detail::lpad(format_fixed(cb[i], places), w) << " "
       << detail::lpad((d >= 0 ? "+" : "-") + format_fixed(std::abs(d), places), w) << "\n";
  }
  return os.str();
}

}  // namespace offlang
