// Copyright 2026 The CCLI Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <iomanip>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "ccli/concept.hpp"
#include "ccli/error.hpp"
#include "ccli/feature_store.hpp"
#include "ccli/model.hpp"
#include "ccli/numerics.hpp"
#include "ccli/trainer.hpp"

namespace ccli {

struct BranchContribution {
  double description = 0.0;  // mean |alpha L_a|
  double class_specific = 0.0;// mean |lambda L_q|
  double text = 0.0;     // mean |L_e|
};

struct EvalReport {
  std::string dataset;
  std::string split;
  std::string fingerprint;
  double accuracy = 0.0;  // percent
  std::vector<std::string> class_names;
  std::vector<double> per_class_accuracy;  // percent; 0 for classes without samples
  std::vector<std::size_t> per_class_count;
  std::vector<int> predictions;
  /// Per class column, averaged over all evaluated samples. Empty for
  /// zero-shot reports.
  std::vector<BranchContribution> contributions;
  nlohmann::json config = nlohmann::json::object();
};

/// Evaluation thread cap: CCLI_THREADS when set, else hardware concurrency.
inline std::size_t eval_threads() {
  if (const char* env = std::getenv("CCLI_THREADS")) {
    char* end = nullptr;
    const long n = std::strtol(env, &end, 10);
    if (end != env && n >= 1) return static_cast<std::size_t>(n);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

/// forward() over row blocks in parallel. Rows are independent, so the
/// result is identical for any thread count.
inline ForwardOutputs forward_parallel(const Matrix& v, const ModelParams& p,
                                       const Hyperparams& hp, std::size_t threads) {
  const std::size_t rows = v.rows();
  threads = std::clamp<std::size_t>(threads, 1, std::max<std::size_t>(1, rows / 64));
  if (threads <= 1) return forward(v, p, hp);

  const std::size_t chunk = (rows + threads - 1) / threads;
  std::vector<ForwardOutputs> parts(threads);
  std::vector<std::exception_ptr> errors(threads);
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&, t] {
      try {
        const std::size_t b = std::min(rows, t * chunk), e = std::min(rows, b + chunk);
        Matrix part(e - b, v.cols());
        for (std::size_t r = b; r < e; ++r) {
          std::copy(v.row(r).begin(), v.row(r).end(), part.row(r - b).begin());
        }
        parts[t] = forward(part, p, hp);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  auto stitch = [&](Matrix ForwardOutputs::*field) {
    Matrix out(rows, (parts[0].*field).cols());
    std::size_t r = 0;
    for (const auto& part : parts) {
      const Matrix& m = part.*field;
      for (std::size_t i = 0; i < m.rows(); ++i, ++r) {
        std::copy(m.row(i).begin(), m.row(i).end(), out.row(r).begin());
      }
    }
    return out;
  };
  ForwardOutputs o;
  o.a = stitch(&ForwardOutputs::a);
  o.h = stitch(&ForwardOutputs::h);
  o.s = stitch(&ForwardOutputs::s);
  o.la = stitch(&ForwardOutputs::la);
  o.lq = stitch(&ForwardOutputs::lq);
  o.le = stitch(&ForwardOutputs::le);
  o.logits = stitch(&ForwardOutputs::logits);
  return o;
}

namespace detail {

/// Fills accuracy fields. `columns[t]` is the score column used for target
/// class t; the prediction is the best column, lowest t on ties.
inline void score_predictions(EvalReport& rep, const Matrix& scores,
                              std::span<const int> labels,
                              std::span<const std::size_t> columns) {
  const std::size_t n_cls = columns.size();
  rep.per_class_accuracy.assign(n_cls, 0.0);
  rep.per_class_count.assign(n_cls, 0);
  rep.predictions.resize(labels.size());
  std::vector<std::size_t> correct(n_cls, 0);
  std::size_t total_correct = 0;
  for (std::size_t r = 0; r < labels.size(); ++r) {
    auto row = scores.row(r);
    std::size_t best = 0;
    for (std::size_t t = 1; t < n_cls; ++t) {
      if (row[columns[t]] > row[columns[best]]) best = t;
    }
    rep.predictions[r] = static_cast<int>(best);
    const auto y = static_cast<std::size_t>(labels[r]);
    ++rep.per_class_count[y];
    if (best == y) {
      ++correct[y];
      ++total_correct;
    }
  }
  for (std::size_t t = 0; t < n_cls; ++t) {
    if (rep.per_class_count[t] > 0) {
      rep.per_class_accuracy[t] = 100.0 * static_cast<double>(correct[t]) /
                                  static_cast<double>(rep.per_class_count[t]);
    }
  }
  rep.accuracy = labels.empty() ? 0.0
                                : 100.0 * static_cast<double>(total_correct) /
                                      static_cast<double>(labels.size());
}

inline std::vector<BranchContribution> contributions(const ForwardOutputs& o,
                                                     const Hyperparams& hp,
                                                     std::span<const std::size_t> columns) {
  std::vector<BranchContribution> out(columns.size());
  const std::size_t rows = o.logits.rows();
  if (rows == 0) return out;
  for (std::size_t t = 0; t < columns.size(); ++t) {
    const std::size_t c = columns[t];
    for (std::size_t r = 0; r < rows; ++r) {
      out[t].description += std::abs(hp.alpha * o.la(r, c));
      out[t].class_specific += std::abs(hp.lambda * o.lq(r, c));
      out[t].text += std::abs(o.le(r, c));
    }
    out[t].description /= static_cast<double>(rows);
    out[t].class_specific /= static_cast<double>(rows);
    out[t].text /= static_cast<double>(rows);
  }
  return out;
}

inline EvalReport evaluate_mapped(const ModelParams& params, const Hyperparams& hp,
                                  const FeatureBundle& bundle,
                                  std::span<const std::size_t> columns) {
  bundle.validate();
  if (bundle.dim() != params.dim()) {
    throw ShapeError("bundle dim " + std::to_string(bundle.dim()) + " vs model dim " +
                     std::to_string(params.dim()));
  }
  const Matrix v = l2_normalize_rows(bundle.image_features);
  const ForwardOutputs o = forward_parallel(v, params, hp, eval_threads());
  EvalReport rep;
  rep.dataset = bundle.meta.dataset;
  rep.split = bundle.meta.split;
  rep.fingerprint = fingerprint(bundle);
  rep.class_names = bundle.class_names;
  score_predictions(rep, o.logits, bundle.labels, columns);
  rep.contributions = contributions(o, hp, columns);
  rep.config = {{"hyperparams", to_json(hp)}};
  return rep;
}

}  // namespace detail

/// Top-1 accuracy of the full model on every image of `bundle`.
inline EvalReport evaluate(const ModelParams& params, const Hyperparams& hp,
                           const FeatureBundle& bundle) {
  if (bundle.num_classes() != params.num_classes()) {
    throw ShapeError("bundle has " + std::to_string(bundle.num_classes()) +
                     " classes, model has " + std::to_string(params.num_classes()));
  }
  std::vector<std::size_t> columns(bundle.num_classes());
  std::iota(columns.begin(), columns.end(), std::size_t{0});
  return detail::evaluate_mapped(params, hp, bundle, columns);
}

/// Zero-shot accuracy from the bundle's own class text features.
/// Predictions are the argmax of the cosine similarities, which is the
/// argmax of the temperature-scaled softmax.
inline EvalReport evaluate_zero_shot(const FeatureBundle& bundle, double tau) {
  bundle.validate();
  const Matrix v = l2_normalize_rows(bundle.image_features);
  const Matrix text = l2_normalize_rows(bundle.class_text_features);
  const Matrix sims = matmul_nt(v, text);
  const Matrix probs = zero_shot_probs(v, text, tau);
  EvalReport rep;
  rep.dataset = bundle.meta.dataset;
  rep.split = bundle.meta.split;
  rep.fingerprint = fingerprint(bundle);
  rep.class_names = bundle.class_names;
  std::vector<std::size_t> columns(bundle.num_classes());
  std::iota(columns.begin(), columns.end(), std::size_t{0});
  detail::score_predictions(rep, sims, bundle.labels, columns);
  double conf = 0.0;
  for (std::size_t r = 0; r < probs.rows(); ++r) {
    conf += probs(r, static_cast<std::size_t>(rep.predictions[r]));
  }
  rep.config = {{"mode", "zero_shot"},
                {"tau", tau},
                {"mean_confidence", probs.rows() ? conf / static_cast<double>(probs.rows())
                                                 : 0.0}};
  return rep;
}

struct DomainShiftResult {
  EvalReport source;
  std::vector<EvalReport> targets;
  double ood_average = 0.0;
};

/// Source-class index for each target class, matched by exact name.
inline std::vector<std::size_t> map_classes(std::span<const std::string> source,
                                            std::span<const std::string> target) {
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < source.size(); ++i) index.emplace(source[i], i);
  std::vector<std::size_t> out;
  std::vector<std::string> missing;
  for (const auto& name : target) {
    auto it = index.find(name);
    if (it == index.end()) {
      missing.push_back(name);
    } else {
      out.push_back(it->second);
    }
  }
  if (!missing.empty()) {
    std::string list;
    for (const auto& m : missing) list += (list.empty() ? "" : ", ") + m;
    throw ClassMapError("target classes absent from source: " + list);
  }
  return out;
}

/// Evaluates a source-trained model on shifted targets. Targets may use a
/// subset of the source classes; logits are restricted to those classes.
inline DomainShiftResult evaluate_domain_shift(const ModelParams& params, const Hyperparams& hp,
                                               const EvalReport& source,
                                               std::span<const FeatureBundle> targets) {
  DomainShiftResult out;
  out.source = source;
  for (const auto& target : targets) {
    if (target.dim() != params.dim()) {
      throw ShapeError("target '" + target.meta.dataset + "' has dim " +
                       std::to_string(target.dim()) + ", model has " +
                       std::to_string(params.dim()));
    }
    const auto columns = map_classes(source.class_names, target.class_names);
    out.targets.push_back(detail::evaluate_mapped(params, hp, target, columns));
  }
  if (!out.targets.empty()) {
    double sum = 0.0;
    for (const auto& r : out.targets) sum += r.accuracy;
    out.ood_average = sum / static_cast<double>(out.targets.size());
  }
  return out;
}

struct ConceptScore {
  std::size_t index = 0;
  std::string text;
  double score = 0.0;
};

/// The k concepts with the highest v W1^T score for one image, descending,
/// lower concept index first on ties.
inline std::vector<ConceptScore> concept_report(const ModelParams& params,
                                                const FeatureBundle& bundle, std::size_t sample,
                                                std::size_t k) {
  if (sample >= bundle.num_images()) {
    throw ShapeError("sample " + std::to_string(sample) + " out of range");
  }
  if (bundle.num_concepts() != params.num_concepts()) {
    throw ShapeError("bundle has " + std::to_string(bundle.num_concepts()) +
                     " concepts, model has " + std::to_string(params.num_concepts()));
  }
  if (k > params.num_concepts()) {
    throw ConfigError("k=" + std::to_string(k) + " exceeds " +
                      std::to_string(params.num_concepts()) + " concepts");
  }
  Matrix v(1, bundle.dim());
  std::copy(bundle.image_features.row(sample).begin(), bundle.image_features.row(sample).end(),
            v.row(0).begin());
  const Matrix scores = matmul_nt(l2_normalize_rows(v), params.w1);
  std::vector<ConceptScore> out;
  if (k == 0) return out;
  for (const auto& e : top_i_select(scores.row(0), k)) {
    out.push_back({e.index, bundle.concept_texts[e.index], e.weight});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Experiments and sweeps

struct ExperimentConfig {
  std::size_t shots = 16;
  std::uint64_t episode_seed = 1;
  TrainConfig train;
};

inline nlohmann::json to_json(const ExperimentConfig& c) {
  return {{"shots", c.shots}, {"seed", c.episode_seed}, {"train", to_json(c.train)}};
}

inline void apply_json(const nlohmann::json& j, ExperimentConfig& c) {
  detail::for_each_key(j, "config", [&](const std::string& k, const nlohmann::json& v) {
    if (k == "shots") c.shots = v.get<std::size_t>();
    else if (k == "seed") c.episode_seed = v.get<std::uint64_t>();
    else if (k == "train") apply_json(v, c.train);
    else return false;
    return true;
  });
}

struct ExperimentResult {
  Episode episode;
  ConceptBank bank;
  TrainResult trained;
  EvalReport report;
};

/// Sample an episode, mine concepts, train, evaluate on `test`.
inline ExperimentResult run_experiment(const FeatureBundle& train_bundle,
                                       const FeatureBundle& test_bundle,
                                       const ExperimentConfig& cfg) {
  ExperimentResult r;
  r.episode = sample_episode(train_bundle, cfg.shots, cfg.episode_seed);
  r.bank = learn_concepts(train_bundle, r.episode, cfg.train.hyperparams.top_i);
  r.trained = train(train_bundle, r.episode, r.bank, cfg.train);
  r.report = evaluate(r.trained.params, cfg.train.hyperparams, test_bundle);
  r.report.config = to_json(cfg);
  return r;
}

struct SweepGrid {
  std::string param;  // alpha, delta, beta, eta, lambda, I or shots
  std::vector<double> values;
};

struct SweepRow {
  std::string param;
  double value = 0.0;
  double accuracy = 0.0;
  std::uint64_t seed = 0;
};

/// `base` with the swept parameter set to `value`.
inline ExperimentConfig with_param(ExperimentConfig base, const std::string& param, double value) {
  auto& hp = base.train.hyperparams;
  auto as_count = [&] {
    if (value < 0 || value != std::floor(value)) {
      throw ConfigError(param + " value " + std::to_string(value) + " is not a count");
    }
    return static_cast<std::size_t>(value);
  };
  if (param == "alpha") hp.alpha = value;
  else if (param == "delta") hp.delta = value;
  else if (param == "beta") hp.beta = value;
  else if (param == "eta") hp.eta = value;
  else if (param == "lambda") hp.lambda = value;
  else if (param == "I") hp.top_i = as_count();
  else if (param == "shots") base.shots = as_count();
  else throw ConfigError("cannot sweep '" + param + "'");
  return base;
}

/// One full train + eval per grid value, in grid order.
inline std::vector<SweepRow> sweep(const SweepGrid& grid, const FeatureBundle& train_bundle,
                                   const FeatureBundle& test_bundle,
                                   const ExperimentConfig& base) {
  if (grid.values.empty()) throw ConfigError("sweep grid has no values");
  std::vector<SweepRow> rows;
  for (double value : grid.values) {
    const auto cfg = with_param(base, grid.param, value);
    const auto result = run_experiment(train_bundle, test_bundle, cfg);
    rows.push_back({grid.param, value, result.report.accuracy, cfg.episode_seed});
  }
  return rows;
}

inline std::string format_number(double x) { return nlohmann::json(x).dump(); }

inline std::string sweep_csv(std::span<const SweepRow> rows) {
  std::string out = "param,value,accuracy_pct,seed\n";
  for (const auto& r : rows) {
    char acc[32];
    std::snprintf(acc, sizeof acc, "%.4f", r.accuracy);
    out += r.param + "," + format_number(r.value) + "," + acc + "," + std::to_string(r.seed) +
           "\n";
  }
  return out;
}

// ---------------------------------------------------------------------------
// Report emission

inline nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json classes = nlohmann::json::array();
  for (std::size_t i = 0; i < r.class_names.size(); ++i) {
    nlohmann::json c = {{"name", r.class_names[i]},
                        {"accuracy_pct", r.per_class_accuracy[i]},
                        {"count", r.per_class_count[i]}};
    if (i < r.contributions.size()) {
      c["contribution"] = {{"concept", r.contributions[i].description},
                           {"class", r.contributions[i].class_specific},
                           {"text", r.contributions[i].text}};
    }
    classes.push_back(std::move(c));
  }
  return {{"dataset", r.dataset},         {"split", r.split},
          {"fingerprint", r.fingerprint}, {"accuracy_pct", r.accuracy},
          {"num_samples", r.predictions.size()}, {"classes", classes},
          {"config", r.config}};
}

inline nlohmann::json to_json(const DomainShiftResult& d) {
  nlohmann::json targets = nlohmann::json::array();
  for (const auto& t : d.targets) targets.push_back(to_json(t));
  return {{"source", to_json(d.source)}, {"targets", targets}, {"ood_average_pct", d.ood_average}};
}

inline std::string to_text(const EvalReport& r) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2);
  os << "dataset " << r.dataset << " / " << r.split << " (" << r.fingerprint << ")\n";
  os << "top-1 accuracy: " << r.accuracy << "%  (" << r.predictions.size() << " samples)\n";
  os << std::left << std::setw(24) << "class" << std::right << std::setw(8) << "acc%"
     << std::setw(8) << "n";
  if (!r.contributions.empty()) {
    os << std::setw(12) << "|aL_a|" << std::setw(12) << "|lL_q|" << std::setw(12) << "|L_e|";
  }
  os << "\n";
  for (std::size_t i = 0; i < r.class_names.size(); ++i) {
    os << std::left << std::setw(24) << r.class_names[i] << std::right << std::setw(8)
       << r.per_class_accuracy[i] << std::setw(8) << r.per_class_count[i];
    if (i < r.contributions.size()) {
      os << std::setprecision(4) << std::setw(12) << r.contributions[i].description
         << std::setw(12) << r.contributions[i].class_specific << std::setw(12)
         << r.contributions[i].text << std::setprecision(2);
    }
    os << "\n";
  }
  return os.str();
}

}  // namespace ccli
