// Copyright 2026 The CCLI Authors
// SPDX-License-Identifier: Apache-2.0
//
// Concept-inference classifier over frozen image/text embeddings.
//
//   a      = v W1^T                      concept pre-activations   [B x K]
//   h      = ReLU(a)                                                [B x K]
//   s      = h W2^T                      integrated concept scores  [B x N]
//   L_a    = exp(-delta (1 - s))         description-concept branch
//   L_q    = exp(-eta (1 - v W3^T))      class-concept branch
//   L_e    = v (f_t + beta Z)^T          adapted text branch
//   logits = alpha L_a + lambda L_q + L_e
//
// Gradients are derived by hand; see backward().

#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ccli/concept.hpp"
#include "ccli/error.hpp"
#include "ccli/matrix.hpp"
#include "ccli/numerics.hpp"
#include "ccli/rng.hpp"

namespace ccli {

/// Which logit branches take part. Disabling the concept-inference (CI)
/// component turns off both concept branches.
struct Branches {
  bool description = true;  // L_a, parameters W1 and W2
  bool class_specific = true;  // L_q, parameter W3
  bool adapter = true;  // Z inside L_e

  friend bool operator==(const Branches&, const Branches&) = default;
};

struct Hyperparams {
  double alpha = 1.5;
  double lambda = 1.0;
  double delta = 4.5;
  double eta = 5.5;
  double beta = 0.6;
  double tau = 0.01;
  std::size_t top_i = 5;
  Branches branches;

  void validate() const {
    if (!(delta > 0.0)) throw HyperparamError("delta must be > 0");
    if (!(eta > 0.0)) throw HyperparamError("eta must be > 0");
    if (!(tau > 0.0)) throw HyperparamError("tau must be > 0");
    if (top_i < 1) throw HyperparamError("I must be >= 1");
    if (!(alpha >= 0.0) || !(lambda >= 0.0) || !(beta >= 0.0)) {
      throw HyperparamError("alpha, lambda and beta must be >= 0");
    }
  }

  friend bool operator==(const Hyperparams&, const Hyperparams&) = default;
};

struct ModelParams {
  Matrix w1;   // [K x D]
  Matrix w2;   // [N x K]
  Matrix w3;   // [N x D]
  Matrix z;    // [N x D]
  /// Class text features as stored in the bundle; frozen. The forward pass
  /// normalizes its rows, matching the zero-shot classifier.
  Matrix f_t;  // [N x D]

  std::size_t dim() const noexcept { return f_t.cols(); }
  std::size_t num_classes() const noexcept { return f_t.rows(); }
  std::size_t num_concepts() const noexcept { return w1.rows(); }

  void validate() const {
    const std::size_t n = num_classes(), d = dim(), k = num_concepts();
    if (w1.cols() != d || w2.rows() != n || w2.cols() != k || w3.rows() != n ||
        w3.cols() != d || !z.same_shape(f_t)) {
      throw ShapeError("inconsistent parameter shapes: W1 " + w1.shape_str() + ", W2 " +
                       w2.shape_str() + ", W3 " + w3.shape_str() + ", Z " + z.shape_str() +
                       ", f_t " + f_t.shape_str());
    }
  }

  friend bool operator==(const ModelParams&, const ModelParams&) = default;
};

enum class W2Init { kTop1, kRandom };

inline const char* to_string(W2Init w) { return w == W2Init::kTop1 ? "top1" : "random"; }

inline W2Init w2_init_from_string(const std::string& s) {
  if (s == "top1") return W2Init::kTop1;
  if (s == "random") return W2Init::kRandom;
  throw ConfigError("unknown w2_init '" + s + "' (expected top1 or random)");
}

/// W1 <- V_cp, W3 <- V_mu, Z <- 0, f_t <- class text features. W2 either
/// links each concept to the class of its top-1 support image (1/count per
/// class row) or is uniform in +-0.01. Learnable tensors start at
/// single-precision values so an untrained model persists exactly.
inline ModelParams init_params(const ConceptBank& bank, const Matrix& class_text, W2Init w2_init,
                               std::uint64_t seed) {
  ModelParams p;
  if (class_text.rows() != bank.v_mu.rows() || class_text.cols() != bank.v_cp.cols()) {
    throw ShapeError("class text " + class_text.shape_str() + " vs concept bank V_mu " +
                     bank.v_mu.shape_str());
  }
  if (bank.top1_class.size() != bank.v_cp.rows()) {
    throw ShapeError("concept bank top1_class length disagrees with V_cp rows");
  }
  p.f_t = class_text;
  p.w1 = round_to_f32(bank.v_cp);
  p.w3 = round_to_f32(bank.v_mu);
  p.z = Matrix(p.f_t.rows(), p.f_t.cols());
  p.w2 = Matrix(p.f_t.rows(), bank.v_cp.rows());
  if (w2_init == W2Init::kTop1) {
    std::vector<std::size_t> count(p.w2.rows(), 0);
    for (int c : bank.top1_class) ++count.at(static_cast<std::size_t>(c));
    for (std::size_t k = 0; k < bank.top1_class.size(); ++k) {
      const auto n = static_cast<std::size_t>(bank.top1_class[k]);
      p.w2(n, k) = 1.0 / static_cast<double>(count[n]);
    }
  } else {
    SplitMix64 rng(seed);
    for (double& x : p.w2.data()) x = 0.02 * rng.uniform() - 0.01;
  }
  p.w2 = round_to_f32(std::move(p.w2));
  p.validate();
  return p;
}

/// Elementwise exp(-sharpness * (1 - x)).
inline Matrix affinity(const Matrix& x, double sharpness) {
  Matrix out = x;
  for (double& e : out.data()) e = std::exp(-sharpness * (1.0 - e));
  return out;
}

/// Zero-shot class probabilities: softmax over cosine similarity / tau.
inline Matrix zero_shot_probs(const Matrix& v, const Matrix& f_t, double tau) {
  if (!(tau > 0.0)) throw HyperparamError("tau must be > 0");
  Matrix sims = matmul_nt(v, f_t);
  for (double& x : sims.data()) x /= tau;
  return softmax_rows(sims);
}

struct ForwardOutputs {
  Matrix a;       // v W1^T
  Matrix h;       // ReLU(a)
  Matrix s;       // h W2^T
  Matrix la;
  Matrix lq;
  Matrix le;
  Matrix logits;
};

namespace detail {
inline void require_finite(const Matrix& m, const char* stage) {
  if (!m.all_finite()) throw NonFiniteError(std::string("non-finite values in ") + stage);
}
}  // namespace detail

/// `v` rows are expected to be unit length. Disabled branches are zero.
inline ForwardOutputs forward(const Matrix& v, const ModelParams& p, const Hyperparams& hp) {
  p.validate();
  if (v.cols() != p.dim()) {
    throw ShapeError("features " + v.shape_str() + " vs model dim " + std::to_string(p.dim()));
  }
  const std::size_t b = v.rows(), n = p.num_classes(), k = p.num_concepts();
  ForwardOutputs o;

  if (hp.branches.description) {
    o.a = matmul_nt(v, p.w1);
    o.h = o.a;
    for (double& x : o.h.data()) x = x > 0.0 ? x : 0.0;
    o.s = matmul_nt(o.h, p.w2);
    o.la = affinity(o.s, hp.delta);
  } else {
    o.a = Matrix(b, k);
    o.h = Matrix(b, k);
    o.s = Matrix(b, n);
    o.la = Matrix(b, n);
  }
  detail::require_finite(o.la, "L_a");

  if (hp.branches.class_specific) {
    o.lq = affinity(matmul_nt(v, p.w3), hp.eta);
  } else {
    o.lq = Matrix(b, n);
  }
  detail::require_finite(o.lq, "L_q");

  const Matrix text = l2_normalize_rows(p.f_t);
  if (hp.branches.adapter) {
    Matrix adapted = text;
    auto dst = adapted.data();
    auto zz = p.z.data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += hp.beta * zz[i];
    o.le = matmul_nt(v, adapted);
  } else {
    o.le = matmul_nt(v, text);
  }
  detail::require_finite(o.le, "L_e");

  o.logits = Matrix(b, n);
  auto out = o.logits.data();
  auto la = o.la.data(), lq = o.lq.data(), le = o.le.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = hp.alpha * la[i] + hp.lambda * lq[i] + le[i];
  }
  detail::require_finite(o.logits, "logits");
  return o;
}

struct Gradients {
  double loss = 0.0;
  Matrix w1, w2, w3, z;
  ForwardOutputs outputs;
};

/// Cross-entropy loss and its gradients for W1, W2, W3 and Z.
///
/// With g = dloss/dlogits:
///   G_a = delta * alpha * (g . L_a)        dloss/ds
///   dW2 = G_a^T h
///   dW1 = ((G_a W2) . [a > 0])^T v
///   dW3 = (eta * lambda * (g . L_q))^T v
///   dZ  = beta * g^T v
inline Gradients backward(const Matrix& v, std::span<const int> labels, const ModelParams& p,
                          const Hyperparams& hp, bool freeze_w3 = false) {
  Gradients gr;
  gr.outputs = forward(v, p, hp);
  const auto& o = gr.outputs;
  auto ce = softmax_ce(o.logits, labels);
  gr.loss = ce.loss;
  const Matrix& g = ce.grad;

  gr.w1 = Matrix(p.w1.rows(), p.w1.cols());
  gr.w2 = Matrix(p.w2.rows(), p.w2.cols());
  gr.w3 = Matrix(p.w3.rows(), p.w3.cols());
  gr.z = Matrix(p.z.rows(), p.z.cols());

  if (hp.branches.description) {
    Matrix ga = g;
    auto gad = ga.data();
    auto la = o.la.data();
    for (std::size_t i = 0; i < gad.size(); ++i) gad[i] *= hp.delta * hp.alpha * la[i];
    gr.w2 = matmul_tn(ga, o.h);
    Matrix u = matmul(ga, p.w2);  // [B x K]
    auto ud = u.data();
    auto ad = o.a.data();
    for (std::size_t i = 0; i < ud.size(); ++i) {
      if (!(ad[i] > 0.0)) ud[i] = 0.0;
    }
    gr.w1 = matmul_tn(u, v);
  }
  if (hp.branches.class_specific && !freeze_w3) {
    Matrix gq = g;
    auto gqd = gq.data();
    auto lq = o.lq.data();
    for (std::size_t i = 0; i < gqd.size(); ++i) gqd[i] *= hp.eta * hp.lambda * lq[i];
    gr.w3 = matmul_tn(gq, v);
  }
  if (hp.branches.adapter) {
    gr.z = matmul_tn(g, v);
    for (double& x : gr.z.data()) x *= hp.beta;
  }
  return gr;
}

}  // namespace ccli
