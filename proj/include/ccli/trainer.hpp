// Copyright 2026 The CCLI Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "ccli/concept.hpp"
#include "ccli/error.hpp"
#include "ccli/feature_store.hpp"
#include "ccli/model.hpp"
#include "ccli/numerics.hpp"
#include "ccli/rng.hpp"
#include "ccli/tensor_io.hpp"

namespace ccli {

struct TrainConfig {
  std::size_t epochs = 50;
  std::size_t batch_size = 256;
  double lr = 1e-3;
  double lr_min = 0.0;
  std::uint64_t seed = 1;
  bool freeze_w3 = false;
  W2Init w2_init = W2Init::kTop1;
  AdamWConfig optimizer;
  Hyperparams hyperparams;

  void validate() const {
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (!(lr >= 0.0)) throw ConfigError("lr must be >= 0");
    if (!(lr_min >= 0.0 && lr_min <= lr)) throw ConfigError("need 0 <= lr_min <= lr");
    hyperparams.validate();
  }
};

struct EpochLog {
  std::size_t epoch = 0;
  double loss = 0.0;
  double train_acc = 0.0;  // percent
  double lr = 0.0;         // rate used by the epoch's last step

  friend bool operator==(const EpochLog&, const EpochLog&) = default;
};

struct TrainLog {
  std::vector<EpochLog> epochs;
  std::size_t steps = 0;
  double wall_seconds = 0.0;
};

struct TrainResult {
  ModelParams params;
  TrainLog log;
};

// ---------------------------------------------------------------------------
// JSON mapping. apply_json() overrides only the keys present and rejects
// unknown keys, so partial config files layer over defaults.

namespace detail {
template <typename Fn>
void for_each_key(const nlohmann::json& j, const char* where, Fn&& fn) {
  if (!j.is_object()) throw ConfigError(std::string(where) + " must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    try {
      if (!fn(it.key(), it.value())) {
        throw ConfigError(std::string("unknown key '") + it.key() + "' in " + where);
      }
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("bad value for '") + it.key() + "' in " + where + ": " +
                        e.what());
    }
  }
}
}  // namespace detail

inline nlohmann::json to_json(const Branches& b) {
  return {{"description", b.description},
          {"class_specific", b.class_specific},
          {"adapter", b.adapter}};
}

inline void apply_json(const nlohmann::json& j, Branches& b) {
  detail::for_each_key(j, "branches", [&](const std::string& k, const nlohmann::json& v) {
    if (k == "description") b.description = v.get<bool>();
    else if (k == "class_specific") b.class_specific = v.get<bool>();
    else if (k == "adapter") b.adapter = v.get<bool>();
    else return false;
    return true;
  });
}

inline nlohmann::json to_json(const Hyperparams& h) {
  return {{"alpha", h.alpha}, {"lambda", h.lambda}, {"delta", h.delta},
          {"eta", h.eta},     {"beta", h.beta},     {"tau", h.tau},
          {"top_i", h.top_i}, {"branches", to_json(h.branches)}};
}

inline void apply_json(const nlohmann::json& j, Hyperparams& h) {
  detail::for_each_key(j, "hyperparams", [&](const std::string& k, const nlohmann::json& v) {
    if (k == "alpha") h.alpha = v.get<double>();
    else if (k == "lambda") h.lambda = v.get<double>();
    else if (k == "delta") h.delta = v.get<double>();
    else if (k == "eta") h.eta = v.get<double>();
    else if (k == "beta") h.beta = v.get<double>();
    else if (k == "tau") h.tau = v.get<double>();
    else if (k == "top_i") h.top_i = v.get<std::size_t>();
    else if (k == "branches") apply_json(v, h.branches);
    else return false;
    return true;
  });
}

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"lr", c.lr},
          {"lr_min", c.lr_min},
          {"seed", c.seed},
          {"freeze_w3", c.freeze_w3},
          {"w2_init", to_string(c.w2_init)},
          {"optimizer",
           {{"beta1", c.optimizer.beta1},
            {"beta2", c.optimizer.beta2},
            {"eps", c.optimizer.eps},
            {"weight_decay", c.optimizer.weight_decay}}},
          {"hyperparams", to_json(c.hyperparams)}};
}

inline void apply_json(const nlohmann::json& j, AdamWConfig& o) {
  detail::for_each_key(j, "optimizer", [&](const std::string& k, const nlohmann::json& v) {
    if (k == "beta1") o.beta1 = v.get<double>();
    else if (k == "beta2") o.beta2 = v.get<double>();
    else if (k == "eps") o.eps = v.get<double>();
    else if (k == "weight_decay") o.weight_decay = v.get<double>();
    else return false;
    return true;
  });
}

inline void apply_json(const nlohmann::json& j, TrainConfig& c) {
  detail::for_each_key(j, "train", [&](const std::string& k, const nlohmann::json& v) {
    if (k == "epochs") c.epochs = v.get<std::size_t>();
    else if (k == "batch_size") c.batch_size = v.get<std::size_t>();
    else if (k == "lr") c.lr = v.get<double>();
    else if (k == "lr_min") c.lr_min = v.get<double>();
    else if (k == "seed") c.seed = v.get<std::uint64_t>();
    else if (k == "freeze_w3") c.freeze_w3 = v.get<bool>();
    else if (k == "w2_init") c.w2_init = w2_init_from_string(v.get<std::string>());
    else if (k == "optimizer") apply_json(v, c.optimizer);
    else if (k == "hyperparams") apply_json(v, c.hyperparams);
    else return false;
    return true;
  });
}

inline nlohmann::json to_json(const EpochLog& e) {
  return {{"epoch", e.epoch}, {"loss", e.loss}, {"train_acc", e.train_acc}, {"lr", e.lr}};
}

// ---------------------------------------------------------------------------

namespace detail {
// Stream index reserved for the random W2 initializer; epochs use 0, 1, ...
inline constexpr std::uint64_t kW2Stream = ~std::uint64_t{0};

template <typename Fn>
decltype(auto) at_step(std::size_t epoch, std::size_t step, Fn&& fn) {
  auto where = [&] {
    return "epoch " + std::to_string(epoch) + " step " + std::to_string(step) + ": ";
  };
  try {
    return fn();
  } catch (const NonFiniteGradError& e) {
    throw NonFiniteGradError(where() + e.what());
  } catch (const NonFiniteError& e) {
    throw NonFiniteError(where() + e.what());
  }
}
}  // namespace detail

/// Trains on the episode's support images, starting from the concept bank.
///
/// Each epoch shuffles the support set with SplitMix64(mix(seed, epoch)) and
/// walks it in batches (the last partial batch is kept). Every batch runs
/// forward, cross-entropy, backward and one AdamW step per active tensor in
/// the order W1, W2, W3, Z, with the learning rate cosine-annealed over all
/// epochs * ceil(MN / batch) steps. Final parameters are rounded to single
/// precision so they equal their checkpointed form.
inline TrainResult train(const FeatureBundle& bundle, const Episode& episode,
                         const ConceptBank& bank, const TrainConfig& cfg) {
  cfg.validate();
  const auto& hp = cfg.hyperparams;
  if (bank.v_cp.rows() != bundle.num_concepts() || bank.v_cp.cols() != bundle.dim() ||
      bank.v_mu.rows() != bundle.num_classes() || bank.v_mu.cols() != bundle.dim()) {
    throw ShapeError("concept bank V_cp " + bank.v_cp.shape_str() + ", V_mu " +
                     bank.v_mu.shape_str() + " does not match bundle (K=" +
                     std::to_string(bundle.num_concepts()) + ", N=" +
                     std::to_string(bundle.num_classes()) + ", D=" +
                     std::to_string(bundle.dim()) + ")");
  }
  if (episode.indices.size() != bundle.num_classes()) {
    throw ShapeError("episode covers " + std::to_string(episode.indices.size()) +
                     " classes, bundle has " + std::to_string(bundle.num_classes()));
  }
  const auto start = std::chrono::steady_clock::now();

  const FeatureBundle support = select_images(bundle, episode.flat());
  const Matrix v_all = l2_normalize_rows(support.image_features);
  const std::size_t n_support = v_all.rows();

  TrainResult result;
  result.params = init_params(bank, bundle.class_text_features, cfg.w2_init,
                              mix(cfg.seed, detail::kW2Stream));
  ModelParams& p = result.params;
  if (n_support == 0) {
    throw InsufficientShotsError("episode has no support images");
  }

  const std::size_t steps_per_epoch = (n_support + cfg.batch_size - 1) / cfg.batch_size;
  const ScheduleConfig sched{cfg.lr, cfg.epochs * steps_per_epoch, cfg.lr_min};
  OptimizerState st_w1(p.w1, cfg.optimizer), st_w2(p.w2, cfg.optimizer),
      st_w3(p.w3, cfg.optimizer), st_z(p.z, cfg.optimizer);
  const bool train_w12 = hp.branches.description;
  const bool train_w3 = hp.branches.class_specific && !cfg.freeze_w3;
  const bool train_z = hp.branches.adapter;

  std::size_t step = 0;
  std::vector<std::size_t> order(n_support);
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    SplitMix64 rng(mix(cfg.seed, epoch));
    fisher_yates(std::span<std::size_t>(order), rng);

    double loss_sum = 0.0;
    std::size_t correct = 0;
    double lr = 0.0;
    for (std::size_t begin = 0; begin < n_support; begin += cfg.batch_size) {
      const std::size_t end = std::min(begin + cfg.batch_size, n_support);
      Matrix v(end - begin, v_all.cols());
      std::vector<int> labels(end - begin);
      for (std::size_t i = begin; i < end; ++i) {
        auto src = v_all.row(order[i]);
        std::copy(src.begin(), src.end(), v.row(i - begin).begin());
        labels[i - begin] = support.labels[order[i]];
      }
      lr = cosine_lr(sched, step);
      detail::at_step(epoch, step, [&] {
        const Gradients g = backward(v, labels, p, hp, cfg.freeze_w3);
        if (!std::isfinite(g.loss)) throw NonFiniteError("loss is not finite");
        if (train_w12) {
          adamw_step(p.w1, g.w1, st_w1, lr);
          adamw_step(p.w2, g.w2, st_w2, lr);
        }
        if (train_w3) adamw_step(p.w3, g.w3, st_w3, lr);
        if (train_z) adamw_step(p.z, g.z, st_z, lr);
        loss_sum += g.loss * static_cast<double>(labels.size());
        for (std::size_t r = 0; r < labels.size(); ++r) {
          if (argmax(g.outputs.logits.row(r)) == static_cast<std::size_t>(labels[r])) ++correct;
        }
      });
      ++step;
    }
    result.log.epochs.push_back({epoch + 1, loss_sum / static_cast<double>(n_support),
                                 100.0 * static_cast<double>(correct) /
                                     static_cast<double>(n_support),
                                 lr});
  }

  p.w1 = round_to_f32(std::move(p.w1));
  p.w2 = round_to_f32(std::move(p.w2));
  p.w3 = round_to_f32(std::move(p.w3));
  p.z = round_to_f32(std::move(p.z));
  result.log.steps = step;
  result.log.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

// ---------------------------------------------------------------------------
// Checkpoints: a tensor directory (w1, w2, w3, z, f_t) plus checkpoint.json.

struct Checkpoint {
  ModelParams params;
  TrainConfig config;
  /// Free-form provenance: concept bank identity, episode, step count.
  nlohmann::json provenance = nlohmann::json::object();
};

inline void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& dir) {
  const auto& p = ckpt.params;
  p.validate();
  std::filesystem::create_directories(dir);
  nlohmann::json tensors = nlohmann::json::object();
  tensor_io::put(dir, tensors, "w1", p.w1);
  tensor_io::put(dir, tensors, "w2", p.w2);
  tensor_io::put(dir, tensors, "w3", p.w3);
  tensor_io::put(dir, tensors, "z", p.z);
  tensor_io::put(dir, tensors, "f_t", p.f_t);
  const nlohmann::json manifest = {{"version", tensor_io::kFormatVersion},
                                   {"kind", "checkpoint"},
                                   {"dim", p.dim()},
                                   {"num_classes", p.num_classes()},
                                   {"num_concepts", p.num_concepts()},
                                   {"tensors", tensors}};
  nlohmann::json train = to_json(ckpt.config);
  train.erase("hyperparams");
  const nlohmann::json sidecar = {{"version", tensor_io::kFormatVersion},
                                  {"hyperparams", to_json(ckpt.config.hyperparams)},
                                  {"train", train},
                                  {"provenance", ckpt.provenance}};
  tensor_io::write_json(dir / "manifest.json", manifest);
  tensor_io::write_json(dir / "checkpoint.json", sidecar);
}

/// Loads a checkpoint; `expected_dim`, when given, must equal its feature dim.
inline Checkpoint load_checkpoint(const std::filesystem::path& dir,
                                  std::optional<std::size_t> expected_dim = std::nullopt) {
  const auto manifest = tensor_io::read_manifest(dir);
  const auto sidecar = tensor_io::read_json(dir / "checkpoint.json");
  if (!sidecar.is_object() || sidecar.value("version", -1) != tensor_io::kFormatVersion) {
    throw FormatError("checkpoint.json has unsupported version");
  }
  if (manifest.value("kind", "") != "checkpoint") {
    throw FormatError(dir.string() + " is not a checkpoint");
  }
  Checkpoint ckpt;
  std::size_t d = 0, n = 0, k = 0;
  try {
    d = manifest.at("dim").get<std::size_t>();
    n = manifest.at("num_classes").get<std::size_t>();
    k = manifest.at("num_concepts").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("checkpoint manifest: " + std::string(e.what()));
  }
  if (expected_dim && *expected_dim != d) {
    throw ShapeError("checkpoint has dim " + std::to_string(d) + ", expected " +
                     std::to_string(*expected_dim));
  }
  const auto& tensors = manifest.at("tensors");
  const std::vector<std::pair<const char*, std::vector<std::size_t>>> shapes = {
      {"w1", {k, d}}, {"w2", {n, k}}, {"w3", {n, d}}, {"z", {n, d}}, {"f_t", {n, d}}};
  for (const auto& [name, shape] : shapes) tensor_io::check_shape(tensors, name, shape);
  for (const auto& [name, shape] : shapes) tensor_io::check_file(dir, tensors, name);
  ckpt.params.w1 = tensor_io::get(dir, tensors, "w1");
  ckpt.params.w2 = tensor_io::get(dir, tensors, "w2");
  ckpt.params.w3 = tensor_io::get(dir, tensors, "w3");
  ckpt.params.z = tensor_io::get(dir, tensors, "z");
  ckpt.params.f_t = tensor_io::get(dir, tensors, "f_t");
  ckpt.params.validate();
  try {
    apply_json(sidecar.at("train"), ckpt.config);
    apply_json(sidecar.at("hyperparams"), ckpt.config.hyperparams);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("checkpoint.json: " + std::string(e.what()));
  }
  ckpt.provenance = sidecar.value("provenance", nlohmann::json::object());
  return ckpt;
}

}  // namespace ccli
