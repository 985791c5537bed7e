// Copyright 2026 The CCLI Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "ccli/error.hpp"
#include "ccli/matrix.hpp"
#include "ccli/numerics.hpp"
#include "ccli/rng.hpp"
#include "ccli/tensor_io.hpp"

namespace ccli {

struct BundleMeta {
  std::string prompt_class = "a photo of a {}.";
  std::string prompt_concept = "The photo is {}.";
  std::string encoder;
  std::string dataset;
  std::string split;
  bool normalized = false;
  /// Softmax temperature of the source model, when the extractor knows it.
  std::optional<double> tau;

  friend bool operator==(const BundleMeta&, const BundleMeta&) = default;
};

/// Pre-extracted embeddings for one dataset split.
struct FeatureBundle {
  Matrix image_features;              // [num_images x D]
  std::vector<int> labels;            // num_images class indices
  std::vector<std::string> class_names;
  Matrix class_text_features;         // [N x D]
  std::vector<std::string> concept_texts;
  Matrix concept_text_features;       // [K x D]
  BundleMeta meta;

  std::size_t dim() const noexcept { return class_text_features.cols(); }
  std::size_t num_images() const noexcept { return image_features.rows(); }
  std::size_t num_classes() const noexcept { return class_names.size(); }
  std::size_t num_concepts() const noexcept { return concept_texts.size(); }

  /// Throws ShapeError / LabelError when the invariants do not hold.
  void validate() const {
    const std::size_t d = dim();
    if (class_text_features.rows() != num_classes()) {
      throw ShapeError("class_text_features has " + std::to_string(class_text_features.rows()) +
                       " rows for " + std::to_string(num_classes()) + " classes");
    }
    if (concept_text_features.rows() != num_concepts()) {
      throw ShapeError("concept_text_features has " +
                       std::to_string(concept_text_features.rows()) + " rows for " +
                       std::to_string(num_concepts()) + " concepts");
    }
    if (image_features.cols() != d || concept_text_features.cols() != d) {
      throw ShapeError("feature matrices disagree on dim: images " +
                       image_features.shape_str() + ", class text " +
                       class_text_features.shape_str() + ", concepts " +
                       concept_text_features.shape_str());
    }
    if (labels.size() != num_images()) {
      throw ShapeError(std::to_string(labels.size()) + " labels for " +
                       std::to_string(num_images()) + " images");
    }
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= num_classes()) {
        throw LabelError("image " + std::to_string(i) + " has label " +
                         std::to_string(labels[i]));
      }
    }
  }

  friend bool operator==(const FeatureBundle&, const FeatureBundle&) = default;
};

/// A copy of `b` holding only the images at `indices`, in that order.
inline FeatureBundle select_images(const FeatureBundle& b, std::span<const std::size_t> indices) {
  FeatureBundle out = b;
  out.image_features = Matrix(indices.size(), b.dim());
  out.labels.resize(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= b.num_images()) {
      throw ShapeError("image index " + std::to_string(indices[i]) + " out of range");
    }
    auto src = b.image_features.row(indices[i]);
    std::copy(src.begin(), src.end(), out.image_features.row(i).begin());
    out.labels[i] = b.labels[indices[i]];
  }
  return out;
}

/// 64-bit FNV-1a over the single-precision payload, labels and strings.
inline std::string fingerprint(const FeatureBundle& b) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto eat = [&h](const void* p, std::size_t n) {
    const auto* bytes = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= bytes[i];
      h *= 0x100000001b3ULL;
    }
  };
  auto eat_matrix = [&](const Matrix& m) {
    for (double x : m.data()) {
      const float f = static_cast<float>(x);
      eat(&f, sizeof f);
    }
  };
  eat_matrix(b.image_features);
  eat_matrix(b.class_text_features);
  eat_matrix(b.concept_text_features);
  for (int y : b.labels) eat(&y, sizeof y);
  for (const auto& s : b.class_names) eat(s.c_str(), s.size() + 1);
  for (const auto& s : b.concept_texts) eat(s.c_str(), s.size() + 1);
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

inline nlohmann::json meta_to_json(const BundleMeta& m) {
  nlohmann::json j = {{"prompt_class", m.prompt_class},
                      {"prompt_concept", m.prompt_concept},
                      {"encoder", m.encoder},
                      {"dataset", m.dataset},
                      {"split", m.split},
                      {"normalized", m.normalized}};
  if (m.tau) j["tau"] = *m.tau;
  return j;
}

inline BundleMeta meta_from_json(const nlohmann::json& j) {
  BundleMeta m;
  m.prompt_class = j.value("prompt_class", m.prompt_class);
  m.prompt_concept = j.value("prompt_concept", m.prompt_concept);
  m.encoder = j.value("encoder", "");
  m.dataset = j.value("dataset", "");
  m.split = j.value("split", "");
  m.normalized = j.value("normalized", false);
  if (j.contains("tau") && j.at("tau").is_number()) m.tau = j.at("tau").get<double>();
  return m;
}

/// Writes `bundle` as a directory: manifest.json plus one .f32 file per tensor.
inline void write_bundle(const FeatureBundle& bundle, const std::filesystem::path& dir) {
  bundle.validate();
  std::filesystem::create_directories(dir);
  nlohmann::json tensors = nlohmann::json::object();
  Matrix labels(bundle.labels.size(), 1);
  for (std::size_t i = 0; i < bundle.labels.size(); ++i) labels(i, 0) = bundle.labels[i];
  tensor_io::put(dir, tensors, "image_features", bundle.image_features);
  tensor_io::put(dir, tensors, "labels", labels, /*vector_shape=*/true);
  tensor_io::put(dir, tensors, "class_text_features", bundle.class_text_features);
  tensor_io::put(dir, tensors, "concept_text_features", bundle.concept_text_features);
  nlohmann::json manifest = {{"version", tensor_io::kFormatVersion},
                             {"dim", bundle.dim()},
                             {"num_images", bundle.num_images()},
                             {"num_classes", bundle.num_classes()},
                             {"num_concepts", bundle.num_concepts()},
                             {"class_names", bundle.class_names},
                             {"concept_texts", bundle.concept_texts},
                             {"tensors", tensors},
                             {"meta", meta_to_json(bundle.meta)}};
  tensor_io::write_json(dir / "manifest.json", manifest);
}

/// Reads a bundle directory. Counts in the manifest are cross-checked against
/// every declared tensor shape and file size before any payload is loaded.
inline FeatureBundle read_bundle(const std::filesystem::path& dir) {
  const auto manifest = tensor_io::read_manifest(dir);
  std::size_t dim = 0, n_img = 0, n_cls = 0, n_con = 0;
  FeatureBundle b;
  nlohmann::json tensors;
  try {
    dim = manifest.at("dim").get<std::size_t>();
    n_img = manifest.at("num_images").get<std::size_t>();
    n_cls = manifest.at("num_classes").get<std::size_t>();
    n_con = manifest.at("num_concepts").get<std::size_t>();
    b.class_names = manifest.at("class_names").get<std::vector<std::string>>();
    b.concept_texts = manifest.at("concept_texts").get<std::vector<std::string>>();
    tensors = manifest.at("tensors");
    b.meta = meta_from_json(manifest.value("meta", nlohmann::json::object()));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("manifest.json missing or mistyped field: " + std::string(e.what()));
  }
  if (b.class_names.size() != n_cls) {
    throw CorruptBundleError("num_classes " + std::to_string(n_cls) + " but " +
                             std::to_string(b.class_names.size()) + " class names");
  }
  if (b.concept_texts.size() != n_con) {
    throw CorruptBundleError("num_concepts " + std::to_string(n_con) + " but " +
                             std::to_string(b.concept_texts.size()) + " concept texts");
  }
  tensor_io::check_shape(tensors, "image_features", {n_img, dim});
  tensor_io::check_shape(tensors, "labels", {n_img});
  tensor_io::check_shape(tensors, "class_text_features", {n_cls, dim});
  tensor_io::check_shape(tensors, "concept_text_features", {n_con, dim});
  for (const char* name :
       {"image_features", "labels", "class_text_features", "concept_text_features"}) {
    tensor_io::check_file(dir, tensors, name);
  }

  b.image_features = tensor_io::get(dir, tensors, "image_features");
  b.class_text_features = tensor_io::get(dir, tensors, "class_text_features");
  b.concept_text_features = tensor_io::get(dir, tensors, "concept_text_features");
  const Matrix labels = tensor_io::get(dir, tensors, "labels");
  b.labels.resize(n_img);
  for (std::size_t i = 0; i < n_img; ++i) {
    const double y = labels(i, 0);
    if (y != std::floor(y) || y < 0 || y >= static_cast<double>(n_cls)) {
      throw CorruptBundleError("label " + std::to_string(y) + " at image " + std::to_string(i) +
                               " is not a class index");
    }
    b.labels[i] = static_cast<int>(y);
  }
  b.validate();
  return b;
}

// ---------------------------------------------------------------------------
// Few-shot episodes

struct Episode {
  std::size_t shots = 0;
  std::uint64_t seed = 0;
  /// indices[n] holds the `shots` image indices selected for class n.
  std::vector<std::vector<std::size_t>> indices;

  /// Class-major flattening: all of class 0, then class 1, ...
  std::vector<std::size_t> flat() const {
    std::vector<std::size_t> out;
    out.reserve(shots * indices.size());
    for (const auto& cls : indices) out.insert(out.end(), cls.begin(), cls.end());
    return out;
  }

  friend bool operator==(const Episode&, const Episode&) = default;
};

/// Per class n: shuffle that class's ascending index list with
/// SplitMix64(mix(seed, n)) by forward Fisher-Yates and keep the first M.
/// A smaller M therefore selects a prefix of a larger M.
inline Episode sample_episode(const FeatureBundle& bundle, std::size_t shots, std::uint64_t seed) {
  Episode ep{shots, seed, std::vector<std::vector<std::size_t>>(bundle.num_classes())};
  if (shots == 0) return ep;
  std::vector<std::vector<std::size_t>> by_class(bundle.num_classes());
  for (std::size_t i = 0; i < bundle.labels.size(); ++i) {
    by_class[static_cast<std::size_t>(bundle.labels[i])].push_back(i);
  }
  for (std::size_t n = 0; n < by_class.size(); ++n) {
    auto& pool = by_class[n];
    if (pool.size() < shots) {
      throw InsufficientShotsError("class " + std::to_string(n) + " ('" +
                                   bundle.class_names[n] + "') has " +
                                   std::to_string(pool.size()) + " images, need " +
                                   std::to_string(shots));
    }
    SplitMix64 rng(mix(seed, n));
    fisher_yates(std::span<std::size_t>(pool), rng);
    ep.indices[n].assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(shots));
  }
  return ep;
}

// ---------------------------------------------------------------------------
// Synthetic bundles

struct SynthSpec {
  std::size_t num_classes = 10;
  std::size_t dim = 64;
  std::size_t num_concepts = 64;
  std::size_t train_per_class = 16;
  std::size_t test_per_class = 50;
  /// Per-coordinate standard deviation of the image perturbation.
  double sigma = 0.6;
  /// Per-class offset shared by all of that class's images, relative to sigma.
  double class_shift = 0.5;
  std::uint64_t seed = 7;

  void validate() const {
    if (dim < 2) throw ConfigError("synth dim must be >= 2");
    if (num_classes < 2) throw ConfigError("synth num_classes must be >= 2");
    if (num_concepts < num_classes) throw ConfigError("synth num_concepts must be >= num_classes");
    if (!(sigma > 0.0)) throw ConfigError("synth sigma must be > 0");
    if (!(class_shift >= 0.0)) throw ConfigError("synth class_shift must be >= 0");
  }
};

struct SynthBundles {
  FeatureBundle train;
  FeatureBundle test;
};

/// Class text vectors are random unit vectors t_n. Each image of class n is
/// normalize(t_n + sigma * (class_shift * b_n + e)) with b_n, e ~ N(0, I);
/// b_n is drawn once per class. Concept k < N copies t_n, the rest are random
/// unit vectors. All payloads are rounded to single precision so that the
/// in-memory bundles equal their persisted form.
inline SynthBundles gen_synth(const SynthSpec& spec) {
  spec.validate();
  const std::size_t n_cls = spec.num_classes, d = spec.dim;
  SplitMix64 rng(spec.seed);
  auto gaussian_matrix = [&](std::size_t rows) {
    Matrix m(rows, d);
    for (double& x : m.data()) x = rng.gaussian();
    return m;
  };

  const Matrix class_vec = l2_normalize_rows(gaussian_matrix(n_cls));
  const Matrix class_offset = gaussian_matrix(n_cls);
  Matrix concepts(spec.num_concepts, d);
  for (std::size_t n = 0; n < n_cls; ++n) {
    std::copy(class_vec.row(n).begin(), class_vec.row(n).end(), concepts.row(n).begin());
  }
  if (spec.num_concepts > n_cls) {
    const Matrix extra = l2_normalize_rows(gaussian_matrix(spec.num_concepts - n_cls));
    for (std::size_t k = n_cls; k < spec.num_concepts; ++k) {
      std::copy(extra.row(k - n_cls).begin(), extra.row(k - n_cls).end(),
                concepts.row(k).begin());
    }
  }

  FeatureBundle base;
  for (std::size_t n = 0; n < n_cls; ++n) {
    char name[32];
    std::snprintf(name, sizeof name, "class_%02zu", n);
    base.class_names.emplace_back(name);
  }
  for (std::size_t k = 0; k < spec.num_concepts; ++k) {
    base.concept_texts.push_back(k < n_cls ? "aligned:" + base.class_names[k]
                                           : "concept_" + std::to_string(k));
  }
  base.class_text_features = round_to_f32(class_vec);
  base.concept_text_features = round_to_f32(concepts);
  base.meta.encoder = "synthetic";
  base.meta.dataset = "synth-seed" + std::to_string(spec.seed);
  base.meta.normalized = true;

  auto images = [&](std::size_t per_class, const char* split) {
    FeatureBundle b = base;
    b.meta.split = split;
    b.image_features = Matrix(per_class * n_cls, d);
    b.labels.clear();
    std::size_t row = 0;
    for (std::size_t n = 0; n < n_cls; ++n) {
      for (std::size_t j = 0; j < per_class; ++j, ++row) {
        auto out = b.image_features.row(row);
        for (std::size_t c = 0; c < d; ++c) {
          out[c] = class_vec(n, c) +
                   spec.sigma * (spec.class_shift * class_offset(n, c) + rng.gaussian());
        }
        b.labels.push_back(static_cast<int>(n));
      }
    }
    b.image_features = round_to_f32(l2_normalize_rows(b.image_features));
    return b;
  };
  SynthBundles out;
  out.train = images(spec.train_per_class, "train");
  out.test = images(spec.test_per_class, "test");
  return out;
}

}  // namespace ccli
