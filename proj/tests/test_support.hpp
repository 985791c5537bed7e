// Copyright 2026 The CCLI Authors
// SPDX-License-Identifier: Apache-2.0
//
// Shared helpers for the test binaries. The oracles here are deliberately
// naive and do not call into the engine's kernels.

#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include <unistd.h>

#include <json.hpp>

#include "ccli/matrix.hpp"

namespace ccli::testing {

namespace fs = std::filesystem;
using json = nlohmann::json;

inline json load_fixture(const std::string& name) {
  std::ifstream in(fs::path(CCLI_FIXTURE_DIR) / name);
  if (!in) throw std::runtime_error("missing fixture " + name);
  return json::parse(in);
}

inline fs::path fixture_path(const std::string& name) { return fs::path(CCLI_FIXTURE_DIR) / name; }

/// Fresh, empty scratch directory under the system temp dir.
inline fs::path scratch_dir(const std::string& tag) {
  static std::uint64_t counter = 0;
  const fs::path dir = fs::temp_directory_path() /
                       ("ccli_test_" + tag + "_" + std::to_string(::getpid()) + "_" +
                        std::to_string(counter++));
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

inline Matrix matrix_from_json(const json& j) {
  const std::size_t rows = j.size();
  const std::size_t cols = rows ? j.at(0).size() : 0;
  Matrix m(rows, cols);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) m(r, c) = j.at(r).at(c).get<double>();
  }
  return m;
}

inline Matrix random_matrix(std::mt19937_64& gen, std::size_t rows, std::size_t cols,
                            double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Matrix m(rows, cols);
  for (double& x : m.data()) x = dist(gen);
  return m;
}

inline Matrix random_unit_rows(std::mt19937_64& gen, std::size_t rows, std::size_t cols) {
  std::normal_distribution<double> dist;
  Matrix m(rows, cols);
  for (std::size_t r = 0; r < rows; ++r) {
    double n2 = 0.0;
    for (double& x : m.row(r)) {
      x = dist(gen);
      n2 += x * x;
    }
    for (double& x : m.row(r)) x /= std::sqrt(n2);
  }
  return m;
}

/// Textbook triple loop, C = A * B.
inline Matrix naive_matmul(const Matrix& a, const Matrix& b) {
  Matrix c(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) acc += a(i, k) * b(k, j);
      c(i, j) = acc;
    }
  }
  return c;
}

inline Matrix naive_transpose(const Matrix& a) {
  Matrix t(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  }
  return t;
}

/// Central finite differences of `f` with respect to every entry of `x`.
inline Matrix finite_difference(Matrix& x, const std::function<double()>& f, double h = 1e-6) {
  Matrix g(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double saved = x.data()[i];
    x.data()[i] = saved + h;
    const double up = f();
    x.data()[i] = saved - h;
    const double down = f();
    x.data()[i] = saved;
    g.data()[i] = (up - down) / (2.0 * h);
  }
  return g;
}

/// Largest |a - b| / max(|a|, |b|, floor) over all entries.
inline double max_rel_error(const Matrix& a, const Matrix& b, double floor = 1e-6) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double x = a.data()[i], y = b.data()[i];
    const double denom = std::max({std::abs(x), std::abs(y), floor});
    worst = std::max(worst, std::abs(x - y) / denom);
  }
  return worst;
}

}  // namespace ccli::testing
