#pragma once

// RAdam and AdamW over a ParameterSet, with state keyed by parameter name.
//
// RAdam applies weight decay as an L2 term added to the gradient; AdamW
// decouples it (p -= lr * wd * p before the moment update). Both skip
// frozen parameters.

#include <cmath>
#include <map>
#include <string>
#include <string_view>

#include "offlang/encoder.hpp"
#include "offlang/errors.hpp"
#include "offlang/tensor.hpp"

namespace offlang {

enum class OptimizerKind { RAdam, AdamW };

inline std::string_view optimizer_name(OptimizerKind k) { return k == OptimizerKind::RAdam ? "RAdam" : "AdamW"; }

inline OptimizerKind parse_optimizer(std::string_view s) {
  if (s == "RAdam" || s == "radam") return OptimizerKind::RAdam;
  if (s == "AdamW" || s == "adamw") return OptimizerKind::AdamW;
  throw ConfigError("unknown optimizer '" + std::string(s) + "'");
}

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::RAdam;
  double learning_rate = 2e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

class Optimizer {
 public:
  explicit Optimizer(OptimizerConfig cfg) : cfg_(cfg) {}

  const OptimizerConfig& config() const { return cfg_; }
  long steps() const { return t_; }

  void step(ParameterSet& ps) {
    ++t_;
    for_each_param(ps, [&](const std::string& name, Param& p) {
      if (!p.trainable || p.grad.size() == 0) return;
      update(state_[name], p.value, p.grad);
    });
  }

  // One update of a single tensor; exposed for direct verification.
  struct Moments {
    Mat m, v;
  };

  void update(Moments& s, Mat& value, const Mat& grad_in) const {
    if (s.m.size() == 0) {
      s.m = Mat::Zero(value.rows(), value.cols());
      s.v = Mat::Zero(value.rows(), value.cols());
    }
    const double lr = cfg_.learning_rate, b1 = cfg_.beta1, b2 = cfg_.beta2;
    const double t = static_cast<double>(t_);
    Mat grad = grad_in;
    if (cfg_.kind == OptimizerKind::AdamW) {
      if (cfg_.weight_decay != 0.0) value *= (1.0 - lr * cfg_.weight_decay);
    } else if (cfg_.weight_decay != 0.0) {
      grad += cfg_.weight_decay * value;
    }
    s.m = b1 * s.m + (1.0 - b1) * grad;
    s.v = b2 * s.v + (1.0 - b2) * grad.cwiseProduct(grad);
    const double bc1 = 1.0 - std::pow(b1, t);
    const double bc2 = 1.0 - std::pow(b2, t);
    if (cfg_.kind == OptimizerKind::AdamW) {
      const Mat denom = (s.v.array() / bc2).sqrt() + cfg_.eps;
      value.array() -= (lr / bc1) * s.m.array() / denom.array();
      return;
    }
    const double rho_inf = 2.0 / (1.0 - b2) - 1.0;
    const double rho_t = rho_inf - 2.0 * t * std::pow(b2, t) / bc2;
    if (rho_t > 5.0) {
      const double rect =
          std::sqrt((rho_t - 4.0) * (rho_t - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t));
      const Mat adaptive = std::sqrt(bc2) / (s.v.array().sqrt() + cfg_.eps);
      value.array() -= (lr / bc1) * rect * s.m.array() * adaptive.array();
    } else {
      value.array() -= (lr / bc1) * s.m.array();
    }
  }

  void set_step(long t) { t_ = t; }

 private:
  OptimizerConfig cfg_;
  long t_ = 0;
  std::map<std::string, Moments> state_;
};

// Scales all trainable gradients so their global L2 norm is at most max_norm.
// Returns the norm before clipping.
inline double clip_grad_norm(ParameterSet& ps, double max_norm) {
  double sq = 0.0;
  for_each_param(ps, [&](const std::string&, const Param& p) {
    if (p.trainable && p.grad.size()) sq += p.grad.squaredNorm();
  });
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / (norm + 1e-12);
    for_each_param(ps, [&](const std::string&, Param& p) {
      if (p.trainable && p.grad.size()) p.grad *= s;
    });
  }
  return norm;
}

}  // namespace offlang
