// Copyright 2026 The CCLI Authors
// SPDX-License-Identifier: Apache-2.0
//
// Visual concept mining from a labelled support set.
//
// Description-specific concepts: for each concept text feature t, score every
// support image by t.v, take the top-I images and average them weighted by
// their scores. Class-specific concepts: the mean support feature per class.
// Both are re-normalized to unit length so that concept scores against unit
// inputs stay on a cosine scale with maximum 1.

#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "ccli/error.hpp"
#include "ccli/feature_store.hpp"
#include "ccli/matrix.hpp"
#include "ccli/numerics.hpp"
#include "ccli/tensor_io.hpp"

namespace ccli {

struct TopEntry {
  std::size_t index = 0;
  double weight = 0.0;

  friend bool operator==(const TopEntry&, const TopEntry&) = default;
};

/// The `count` largest entries of `sims`, descending; equal values keep
/// ascending index order.
inline std::vector<TopEntry> top_i_select(std::span<const double> sims, std::size_t count) {
  if (count < 1) throw ConfigError("top-I count must be >= 1");
  if (count > sims.size()) {
    throw InsufficientSupportError("top-I count " + std::to_string(count) + " exceeds " +
                                   std::to_string(sims.size()) + " support images");
  }
  std::vector<std::size_t> order(sims.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(count),
                    order.end(), [&](std::size_t a, std::size_t b) {
                      return sims[a] > sims[b] || (sims[a] == sims[b] && a < b);
                    });
  std::vector<TopEntry> out(count);
  for (std::size_t i = 0; i < count; ++i) out[i] = {order[i], sims[order[i]]};
  return out;
}

struct DescriptionConcepts {
  Matrix v_cp;                          // [K x D], unit rows
  std::vector<std::size_t> top1;        // support row of each concept's best match
  std::vector<std::size_t> fallback;    // concept rows averaged without weights
};

/// Full mining result including the bookkeeping the model initializer needs.
inline DescriptionConcepts mine_description_concepts(const Matrix& support, const Matrix& texts,
                                                     std::size_t top_i) {
  if (support.cols() != texts.cols()) {
    throw ShapeError("support " + support.shape_str() + " vs concept texts " + texts.shape_str());
  }
  const Matrix scores = matmul_nt(texts, support);  // [K x S]
  DescriptionConcepts out{Matrix(texts.rows(), texts.cols()), {}, {}};
  out.top1.reserve(texts.rows());
  for (std::size_t k = 0; k < texts.rows(); ++k) {
    const auto top = top_i_select(scores.row(k), top_i);
    double wsum = 0.0;
    for (const auto& e : top) wsum += e.weight;
    const bool degenerate = !(wsum > 1e-12);
    if (degenerate) out.fallback.push_back(k);
    auto row = out.v_cp.row(k);
    for (const auto& e : top) {
      const double w = degenerate ? 1.0 : e.weight;
      auto src = support.row(e.index);
      for (std::size_t c = 0; c < row.size(); ++c) row[c] += w * src[c];
    }
    const double denom = degenerate ? static_cast<double>(top.size()) : wsum;
    for (double& x : row) x /= denom;
    out.top1.push_back(top.front().index);
  }
  out.v_cp = l2_normalize_rows(out.v_cp);
  return out;
}

inline Matrix learn_description_concepts(const Matrix& support, const Matrix& texts,
                                         std::size_t top_i) {
  return mine_description_concepts(support, texts, top_i).v_cp;
}

/// Normalized per-class mean of the support features; row n is class n.
inline Matrix learn_class_concepts(const Matrix& support, std::span<const int> labels,
                                   std::size_t num_classes, std::size_t shots) {
  if (labels.size() != support.rows()) {
    throw ShapeError(std::to_string(labels.size()) + " labels for support " +
                     support.shape_str());
  }
  Matrix sums(num_classes, support.cols());
  std::vector<std::size_t> counts(num_classes, 0);
  for (std::size_t i = 0; i < support.rows(); ++i) {
    const auto n = static_cast<std::size_t>(labels[i]);
    if (labels[i] < 0 || n >= num_classes) throw LabelError("support label out of range");
    auto dst = sums.row(n);
    auto src = support.row(i);
    for (std::size_t c = 0; c < dst.size(); ++c) dst[c] += src[c];
    ++counts[n];
  }
  for (std::size_t n = 0; n < num_classes; ++n) {
    if (counts[n] == 0) {
      throw InsufficientShotsError("class " + std::to_string(n) + " has no support images");
    }
    if (counts[n] != shots) {
      throw ShapeError("class " + std::to_string(n) + " has " + std::to_string(counts[n]) +
                       " support images, expected " + std::to_string(shots));
    }
    for (double& x : sums.row(n)) x /= static_cast<double>(counts[n]);
  }
  return l2_normalize_rows(sums);
}

struct ConceptProvenance {
  std::string dataset;
  std::string split;
  std::string fingerprint;
  std::uint64_t episode_seed = 0;
  std::size_t shots = 0;
  std::size_t top_i = 0;

  friend bool operator==(const ConceptProvenance&, const ConceptProvenance&) = default;
};

struct ConceptBank {
  Matrix v_cp;  // [K x D]
  Matrix v_mu;  // [N x D]
  /// Class label of the top-1 support image of each description concept.
  std::vector<int> top1_class;
  std::vector<std::size_t> fallback_rows;
  ConceptProvenance provenance;
};

/// Mines both concept types from the episode's support images.
inline ConceptBank learn_concepts(const FeatureBundle& bundle, const Episode& episode,
                                  std::size_t top_i) {
  const auto idx = episode.flat();
  const FeatureBundle support = select_images(bundle, idx);
  const Matrix v = l2_normalize_rows(support.image_features);
  const Matrix t = l2_normalize_rows(bundle.concept_text_features);
  auto mined = mine_description_concepts(v, t, top_i);
  ConceptBank bank;
  bank.v_cp = std::move(mined.v_cp);
  bank.v_mu = learn_class_concepts(v, support.labels, bundle.num_classes(), episode.shots);
  for (std::size_t s : mined.top1) bank.top1_class.push_back(support.labels[s]);
  bank.fallback_rows = std::move(mined.fallback);
  bank.provenance = {bundle.meta.dataset, bundle.meta.split, fingerprint(bundle), episode.seed,
                     episode.shots, top_i};
  return bank;
}

inline void save_concept_bank(const ConceptBank& bank, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json tensors = nlohmann::json::object();
  tensor_io::put(dir, tensors, "v_cp", bank.v_cp);
  tensor_io::put(dir, tensors, "v_mu", bank.v_mu);
  const auto& p = bank.provenance;
  nlohmann::json manifest = {
      {"version", tensor_io::kFormatVersion},
      {"kind", "concept_bank"},
      {"dim", bank.v_cp.cols()},
      {"num_concepts", bank.v_cp.rows()},
      {"num_classes", bank.v_mu.rows()},
      {"tensors", tensors},
      {"top1_class", bank.top1_class},
      {"fallback_rows", bank.fallback_rows},
      {"provenance",
       {{"dataset", p.dataset},
        {"split", p.split},
        {"fingerprint", p.fingerprint},
        {"episode_seed", p.episode_seed},
        {"shots", p.shots},
        {"top_i", p.top_i}}}};
  tensor_io::write_json(dir / "manifest.json", manifest);
}

/// Rows are re-normalized in double after the single-precision load.
inline ConceptBank load_concept_bank(const std::filesystem::path& dir) {
  const auto manifest = tensor_io::read_manifest(dir);
  ConceptBank bank;
  try {
    if (manifest.value("kind", "") != "concept_bank") {
      throw FormatError(dir.string() + " is not a concept bank");
    }
    const auto d = manifest.at("dim").get<std::size_t>();
    const auto k = manifest.at("num_concepts").get<std::size_t>();
    const auto n = manifest.at("num_classes").get<std::size_t>();
    const auto& tensors = manifest.at("tensors");
    tensor_io::check_shape(tensors, "v_cp", {k, d});
    tensor_io::check_shape(tensors, "v_mu", {n, d});
    tensor_io::check_file(dir, tensors, "v_cp");
    tensor_io::check_file(dir, tensors, "v_mu");
    bank.v_cp = l2_normalize_rows(tensor_io::get(dir, tensors, "v_cp"));
    bank.v_mu = l2_normalize_rows(tensor_io::get(dir, tensors, "v_mu"));
    bank.top1_class = manifest.at("top1_class").get<std::vector<int>>();
    bank.fallback_rows = manifest.at("fallback_rows").get<std::vector<std::size_t>>();
    const auto& p = manifest.at("provenance");
    bank.provenance = {p.at("dataset").get<std::string>(),   p.at("split").get<std::string>(),
                       p.at("fingerprint").get<std::string>(),
                       p.at("episode_seed").get<std::uint64_t>(),
                       p.at("shots").get<std::size_t>(), p.at("top_i").get<std::size_t>()};
    if (bank.top1_class.size() != k) {
      throw CorruptBundleError("top1_class has " + std::to_string(bank.top1_class.size()) +
                               " entries for " + std::to_string(k) + " concepts");
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("concept bank manifest: " + std::string(e.what()));
  }
  return bank;
}

}  // namespace ccli
