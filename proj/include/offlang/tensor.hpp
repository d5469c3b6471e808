#pragma once

#include <cmath>
#include <numbers>

#include <Eigen/Dense>

namespace offlang {

// Rows are sequence positions.
using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVec = Eigen::Matrix<double, 1, Eigen::Dynamic>;

struct Param {
  Mat value;
  Mat grad;
  bool trainable = true;

  Param() = default;
  explicit Param(Mat v) : value(std::move(v)) {}

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
  void ensure_grad() {
    if (grad.rows() != value.rows() || grad.cols() != value.cols()) zero_grad();
  }
};

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }

inline double gelu_grad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

}  // namespace offlang
