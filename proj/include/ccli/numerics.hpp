// Copyright 2026 The CCLI Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "ccli/error.hpp"
#include "ccli/matrix.hpp"

namespace ccli {

// All reductions below accumulate left to right in index order so results
// are bitwise reproducible.

/// C = A * B
inline Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul " + a.shape_str() + " * " + b.shape_str());
  }
  Matrix c(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto out = c.row(i);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      auto brow = b.row(k);
      for (std::size_t j = 0; j < b.cols(); ++j) out[j] += aik * brow[j];
    }
  }
  return c;
}

/// C = A * B^T
inline Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) {
    throw ShapeError("matmul_nt " + a.shape_str() + " * " + b.shape_str() + "^T");
  }
  Matrix c(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto arow = a.row(i);
    for (std::size_t j = 0; j < b.rows(); ++j) {
      auto brow = b.row(j);
      double acc = 0.0;
      for (std::size_t k = 0; k < arow.size(); ++k) acc += arow[k] * brow[k];
      c(i, j) = acc;
    }
  }
  return c;
}

/// C = A^T * B
inline Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) {
    throw ShapeError("matmul_tn " + a.shape_str() + "^T * " + b.shape_str());
  }
  Matrix c(a.cols(), b.cols());
  for (std::size_t k = 0; k < a.rows(); ++k) {
    auto brow = b.row(k);
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const double aki = a(k, i);
      auto out = c.row(i);
      for (std::size_t j = 0; j < b.cols(); ++j) out[j] += aki * brow[j];
    }
  }
  return c;
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw ShapeError("dot of length " + std::to_string(a.size()) + " and " +
                     std::to_string(b.size()));
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

inline double norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

/// Rows scaled to unit Euclidean norm. Throws ZeroVectorError naming the
/// first row whose norm is below 1e-30.
inline Matrix l2_normalize_rows(const Matrix& m) {
  Matrix out = m;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    const double n = norm(row);
    if (!(n >= 1e-30)) {
      throw ZeroVectorError("row " + std::to_string(r) + " has norm " + std::to_string(n));
    }
    for (double& x : row) x /= n;
  }
  return out;
}

/// Cosine similarity of two unit vectors, clamped to [-1, 1].
inline double cosine_sim(std::span<const double> t, std::span<const double> v) {
  return std::clamp(dot(t, v), -1.0, 1.0);
}

/// Row-wise softmax with max subtraction.
inline Matrix softmax_rows(const Matrix& logits) {
  Matrix p(logits.rows(), logits.cols());
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    auto in = logits.row(r);
    auto out = p.row(r);
    const double mx = *std::max_element(in.begin(), in.end());
    double sum = 0.0;
    for (std::size_t c = 0; c < in.size(); ++c) {
      out[c] = std::exp(in[c] - mx);
      sum += out[c];
    }
    for (double& x : out) x /= sum;
  }
  return p;
}

struct LossAndGrad {
  double loss = 0.0;
  Matrix grad;  // d loss / d logits
};

/// Mean softmax cross-entropy over the batch and its gradient
/// (softmax - onehot) / B.
inline LossAndGrad softmax_ce(const Matrix& logits, std::span<const int> labels) {
  if (labels.size() != logits.rows()) {
    throw ShapeError("softmax_ce: " + std::to_string(labels.size()) + " labels for " +
                     logits.shape_str() + " logits");
  }
  const std::size_t batch = logits.rows();
  const std::size_t classes = logits.cols();
  LossAndGrad out{0.0, Matrix(batch, classes)};
  if (batch == 0) return out;
  for (std::size_t r = 0; r < batch; ++r) {
    const int y = labels[r];
    if (y < 0 || static_cast<std::size_t>(y) >= classes) {
      throw LabelError("label " + std::to_string(y) + " at row " + std::to_string(r) +
                       " outside [0, " + std::to_string(classes) + ")");
    }
    auto in = logits.row(r);
    auto g = out.grad.row(r);
    const double mx = *std::max_element(in.begin(), in.end());
    double sum = 0.0;
    for (std::size_t c = 0; c < classes; ++c) {
      g[c] = std::exp(in[c] - mx);
      sum += g[c];
    }
    out.loss += std::log(sum) - (in[static_cast<std::size_t>(y)] - mx);
    for (std::size_t c = 0; c < classes; ++c) {
      g[c] = (g[c] / sum - (c == static_cast<std::size_t>(y) ? 1.0 : 0.0)) /
             static_cast<double>(batch);
    }
  }
  out.loss /= static_cast<double>(batch);
  return out;
}

/// Index of the row maximum; ties go to the lower index.
inline std::size_t argmax(std::span<const double> row) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < row.size(); ++i) {
    if (row[i] > row[best]) best = i;
  }
  return best;
}

/// Rounds every entry to the nearest single-precision value.
inline Matrix round_to_f32(Matrix m) {
  for (double& x : m.data()) x = static_cast<double>(static_cast<float>(x));
  return m;
}

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

struct OptimizerState {
  std::size_t step = 0;
  Matrix m;
  Matrix s;
  AdamWConfig cfg;

  OptimizerState() = default;
  OptimizerState(const Matrix& param, AdamWConfig c)
      : m(param.rows(), param.cols()), s(param.rows(), param.cols()), cfg(c) {}
};

/// One AdamW update with decoupled weight decay applied before the Adam step.
inline void adamw_step(Matrix& param, const Matrix& grad, OptimizerState& state, double lr) {
  if (!param.same_shape(grad) || !param.same_shape(state.m) || !param.same_shape(state.s)) {
    throw ShapeError("adamw_step: param " + param.shape_str() + ", grad " + grad.shape_str() +
                     ", moments " + state.m.shape_str());
  }
  if (!grad.all_finite()) throw NonFiniteGradError("adamw_step: gradient has NaN/Inf entries");

  const auto& c = state.cfg;
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(c.beta1, t);
  const double bc2 = 1.0 - std::pow(c.beta2, t);

  auto p = param.data();
  auto g = grad.data();
  auto m = state.m.data();
  auto s = state.s.data();
  for (std::size_t i = 0; i < p.size(); ++i) {
    p[i] -= lr * c.weight_decay * p[i];
    m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
    s[i] = c.beta2 * s[i] + (1.0 - c.beta2) * g[i] * g[i];
    const double m_hat = m[i] / bc1;
    const double s_hat = s[i] / bc2;
    p[i] -= lr * m_hat / (std::sqrt(s_hat) + c.eps);
  }
  if (!param.all_finite()) throw NonFiniteError("adamw_step: parameter became non-finite");
}

struct ScheduleConfig {
  double lr_max = 1e-3;
  std::size_t total_steps = 1;
  double lr_min = 0.0;
};

/// Cosine annealing from lr_max at step 0 to lr_min at total_steps.
inline double cosine_lr(const ScheduleConfig& cfg, std::size_t step) {
  if (cfg.total_steps < 1) throw ScheduleError("total_steps must be >= 1");
  if (!(cfg.lr_min >= 0.0 && cfg.lr_min <= cfg.lr_max)) {
    throw ScheduleError("need 0 <= lr_min <= lr_max");
  }
  if (step > cfg.total_steps) {
    throw ScheduleError("step " + std::to_string(step) + " beyond total_steps " +
                        std::to_string(cfg.total_steps));
  }
  const double frac = static_cast<double>(step) / static_cast<double>(cfg.total_steps);
  return cfg.lr_min +
         0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + std::cos(std::numbers::pi * frac));
}

}  // namespace ccli
