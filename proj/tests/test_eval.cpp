// Copyright 2026 The CCLI Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <numeric>
#include <random>
#include <set>
#include <vector>

#include "ccli/ccli.hpp"
#include "test_support.hpp"

namespace ccli {
namespace {

using testing::json;
using testing::matrix_from_json;

// Frozen on the default synth fixture (seed 7), episode seed 1, train seed 1.
constexpr double kCheckpointAcc = 81.6;
constexpr double kShiftedAcc = 67.8;  // same model, target drawn with sigma = 0.9
constexpr double kNoDescriptionAcc = 72.8;
const std::vector<std::pair<double, double>> kDeltaCurve = {
    {0.5, 85.8}, {2.5, 84.8}, {4.5, 81.6}, {6.5, 77.2}, {8.5, 75.8}, {10.5, 74.6}};

const SynthBundles& synth() {
  static const SynthBundles s = gen_synth({});
  return s;
}

const SynthBundles& separable() {
  static const SynthBundles s = [] {
    SynthSpec spec;
    spec.sigma = 1e-9;
    return gen_synth(spec);
  }();
  return s;
}

ModelParams untrained(const FeatureBundle& b, std::size_t shots = 4) {
  const Episode ep = sample_episode(b, shots, 0);
  return init_params(learn_concepts(b, ep, 4), b.class_text_features, W2Init::kTop1, 0);
}

TEST(Evaluate, SeparableLimitIsPerfect) {
  const auto& s = separable();
  const EvalReport r = evaluate(untrained(s.train), Hyperparams{}, s.test);
  EXPECT_EQ(r.accuracy, 100.0);
  EXPECT_EQ(evaluate_zero_shot(s.test, 0.01).accuracy, 100.0);
}

TEST(Evaluate, AllWrongByConstruction) {
  const auto& s = separable();
  FeatureBundle shifted = s.test;
  for (int& y : shifted.labels) y = (y + 1) % static_cast<int>(shifted.num_classes());
  const EvalReport r = evaluate(untrained(s.train), Hyperparams{}, shifted);
  EXPECT_EQ(r.accuracy, 0.0);
  for (double a : r.per_class_accuracy) EXPECT_EQ(a, 0.0);
}

TEST(Evaluate, FixtureCheckpointRegression) {
  const Checkpoint ckpt = load_checkpoint(testing::fixture_path("synth_checkpoint"), 64);
  const EvalReport r = evaluate(ckpt.params, ckpt.config.hyperparams, synth().test);
  EXPECT_DOUBLE_EQ(r.accuracy, kCheckpointAcc);
  EXPECT_EQ(r.fingerprint, fingerprint(synth().test));
  EXPECT_EQ(ckpt.provenance["concepts"]["fingerprint"], fingerprint(synth().train));
}

TEST(Evaluate, AccuracyIsMeanCorrectness) {
  const Checkpoint ckpt = load_checkpoint(testing::fixture_path("synth_checkpoint"));
  const auto& b = synth().test;
  const EvalReport r = evaluate(ckpt.params, ckpt.config.hyperparams, b);
  std::size_t correct = 0;
  std::vector<std::size_t> per(b.num_classes(), 0);
  for (std::size_t i = 0; i < b.num_images(); ++i) {
    if (r.predictions[i] == b.labels[i]) {
      ++correct;
      ++per[static_cast<std::size_t>(b.labels[i])];
    }
  }
  EXPECT_DOUBLE_EQ(r.accuracy, 100.0 * static_cast<double>(correct) / b.num_images());
  for (std::size_t n = 0; n < b.num_classes(); ++n) {
    EXPECT_EQ(r.per_class_count[n], 50u);
    EXPECT_DOUBLE_EQ(r.per_class_accuracy[n], 100.0 * static_cast<double>(per[n]) / 50.0);
  }
}

TEST(Evaluate, PermutationInvariant) {
  const Checkpoint ckpt = load_checkpoint(testing::fixture_path("synth_checkpoint"));
  const auto& b = synth().test;
  std::vector<std::size_t> perm(b.num_images());
  std::iota(perm.begin(), perm.end(), 0);
  std::mt19937_64 gen(3);
  std::shuffle(perm.begin(), perm.end(), gen);
  const EvalReport a = evaluate(ckpt.params, ckpt.config.hyperparams, b);
  const EvalReport p = evaluate(ckpt.params, ckpt.config.hyperparams, select_images(b, perm));
  EXPECT_EQ(a.accuracy, p.accuracy);
  EXPECT_EQ(a.per_class_accuracy, p.per_class_accuracy);
  for (std::size_t i = 0; i < perm.size(); ++i) EXPECT_EQ(p.predictions[i], a.predictions[perm[i]]);
}

TEST(Evaluate, CollapseMatchesZeroShot) {
  Checkpoint ckpt = load_checkpoint(testing::fixture_path("synth_checkpoint"));
  Hyperparams hp = ckpt.config.hyperparams;
  hp.alpha = hp.lambda = 0.0;
  ckpt.params.z = Matrix(ckpt.params.z.rows(), ckpt.params.z.cols());
  for (const FeatureBundle* b : {&synth().test, &synth().train, &separable().test}) {
    const EvalReport a = evaluate(ckpt.params, hp, *b);
    const EvalReport z = evaluate_zero_shot(*b, 0.01);
    EXPECT_EQ(a.predictions, z.predictions);
    EXPECT_EQ(a.accuracy, z.accuracy);
  }
}

TEST(Evaluate, ThreadCountDoesNotChangeResults) {
  const Checkpoint ckpt = load_checkpoint(testing::fixture_path("synth_checkpoint"));
  const Matrix v = l2_normalize_rows(synth().test.image_features);
  const auto one = forward_parallel(v, ckpt.params, ckpt.config.hyperparams, 1);
  const auto many = forward_parallel(v, ckpt.params, ckpt.config.hyperparams, 7);
  EXPECT_EQ(one.logits, many.logits);
  EXPECT_EQ(one.la, many.la);
  ::setenv("CCLI_THREADS", "3", 1);
  EXPECT_EQ(eval_threads(), 3u);
  ::unsetenv("CCLI_THREADS");
}

TEST(Evaluate, ContributionsAreColumnMeans) {
  const Checkpoint ckpt = load_checkpoint(testing::fixture_path("synth_checkpoint"));
  const auto& hp = ckpt.config.hyperparams;
  const auto& b = synth().test;
  const EvalReport r = evaluate(ckpt.params, hp, b);
  const auto o = forward(l2_normalize_rows(b.image_features), ckpt.params, hp);
  ASSERT_EQ(r.contributions.size(), b.num_classes());
  for (std::size_t n = 0; n < b.num_classes(); ++n) {
    double la = 0, lq = 0, le = 0;
    for (std::size_t i = 0; i < b.num_images(); ++i) {
      la += std::abs(hp.alpha * o.la(i, n));
      lq += std::abs(hp.lambda * o.lq(i, n));
      le += std::abs(o.le(i, n));
    }
    const double m = static_cast<double>(b.num_images());
    EXPECT_NEAR(r.contributions[n].description, la / m, 1e-12);
    EXPECT_NEAR(r.contributions[n].class_specific, lq / m, 1e-12);
    EXPECT_NEAR(r.contributions[n].text, le / m, 1e-12);
  }
}

TEST(Evaluate, ShapeMismatch) {
  SynthSpec spec;
  spec.dim = 32;
  const auto other = gen_synth(spec);
  const Checkpoint ckpt = load_checkpoint(testing::fixture_path("synth_checkpoint"));
  EXPECT_THROW(evaluate(ckpt.params, ckpt.config.hyperparams, other.test), ShapeError);
}

TEST(ZeroShot, ReportsConfidenceAndTau) {
  const EvalReport r = evaluate_zero_shot(synth().test, 0.01);
  EXPECT_EQ(r.config["tau"], 0.01);
  EXPECT_GT(r.config["mean_confidence"].get<double>(), 0.1);
  EXPECT_LE(r.config["mean_confidence"].get<double>(), 1.0);
  EXPECT_THROW(evaluate_zero_shot(synth().test, 0.0), HyperparamError);
}

class DomainShift : public ::testing::Test {
 protected:
  void SetUp() override {
    ckpt_ = load_checkpoint(testing::fixture_path("synth_checkpoint"));
    source_ = evaluate(ckpt_.params, ckpt_.config.hyperparams, synth().test);
  }
  Checkpoint ckpt_;
  EvalReport source_;
};

TEST_F(DomainShift, IdentityTarget) {
  const std::vector<FeatureBundle> targets = {synth().test};
  const auto d = evaluate_domain_shift(ckpt_.params, ckpt_.config.hyperparams, source_, targets);
  ASSERT_EQ(d.targets.size(), 1u);
  EXPECT_EQ(d.targets[0].predictions, source_.predictions);
  EXPECT_EQ(d.ood_average, source_.accuracy);
}

TEST_F(DomainShift, LargerSigmaIsHarderAndAveraged) {
  SynthSpec spec;
  spec.sigma = 0.9;
  const FeatureBundle noisy = gen_synth(spec).test;
  const std::vector<FeatureBundle> targets = {noisy, synth().test};
  const auto d = evaluate_domain_shift(ckpt_.params, ckpt_.config.hyperparams, source_, targets);
  EXPECT_DOUBLE_EQ(d.targets[0].accuracy, kShiftedAcc);
  EXPECT_LE(d.targets[0].accuracy, source_.accuracy);
  EXPECT_NEAR(d.ood_average, (d.targets[0].accuracy + d.targets[1].accuracy) / 2, 1e-12);
}

TEST_F(DomainShift, ClassSubsetRestrictsLogits) {
  // Keep classes 2, 5 and 7, relabelled 0..2 in that order.
  const auto& full = synth().test;
  const std::vector<std::size_t> keep = {2, 5, 7};
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < full.num_images(); ++i) {
    if (std::find(keep.begin(), keep.end(), full.labels[i]) != keep.end()) idx.push_back(i);
  }
  FeatureBundle sub = select_images(full, idx);
  Matrix text(keep.size(), full.dim());
  sub.class_names.clear();
  for (std::size_t j = 0; j < keep.size(); ++j) {
    sub.class_names.push_back(full.class_names[keep[j]]);
    std::copy(full.class_text_features.row(keep[j]).begin(),
              full.class_text_features.row(keep[j]).end(), text.row(j).begin());
  }
  sub.class_text_features = text;
  for (int& y : sub.labels) {
    y = static_cast<int>(std::find(keep.begin(), keep.end(), y) - keep.begin());
  }
  sub.validate();
  const std::vector<FeatureBundle> targets = {sub};
  const auto d = evaluate_domain_shift(ckpt_.params, ckpt_.config.hyperparams, source_, targets);

  const auto o = forward(l2_normalize_rows(sub.image_features), ckpt_.params,
                         ckpt_.config.hyperparams);
  for (std::size_t i = 0; i < sub.num_images(); ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < keep.size(); ++j) {
      if (o.logits(i, keep[j]) > o.logits(i, keep[best])) best = j;
    }
    EXPECT_EQ(d.targets[0].predictions[i], static_cast<int>(best));
  }
  EXPECT_EQ(d.targets[0].class_names, sub.class_names);
}

TEST_F(DomainShift, UnknownClassNamesListed) {
  FeatureBundle renamed = synth().test;
  renamed.class_names[1] = "zebra";
  renamed.class_names[4] = "yak";
  const std::vector<FeatureBundle> targets = {renamed};
  try {
    evaluate_domain_shift(ckpt_.params, ckpt_.config.hyperparams, source_, targets);
    FAIL();
  } catch (const ClassMapError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("zebra"), std::string::npos);
    EXPECT_NE(msg.find("yak"), std::string::npos);
  }
}

TEST(ConceptReport, MatchesFullSortOracle) {
  const auto fx = testing::load_fixture("concept_report_oracle.json");
  ASSERT_EQ(fx["cases"].size(), 100u);
  for (const auto& c : fx["cases"]) {
    ModelParams p;
    p.w1 = matrix_from_json(c["w1"]);
    const std::size_t d = p.w1.cols(), k = p.w1.rows();
    p.w2 = Matrix(1, k);
    p.w3 = Matrix(1, d);
    p.z = Matrix(1, d);
    p.f_t = Matrix(1, d, 1.0);
    FeatureBundle b;
    b.image_features = Matrix(1, d, c["image"].get<std::vector<double>>());
    b.labels = {0};
    b.class_names = {"c"};
    b.class_text_features = p.f_t;
    for (std::size_t j = 0; j < k; ++j) b.concept_texts.push_back("w" + std::to_string(j));
    b.concept_text_features = Matrix(k, d, 1.0);
    const auto got = concept_report(p, b, 0, c["k"].get<std::size_t>());
    const auto idx = c["indices"].get<std::vector<std::size_t>>();
    const auto scores = c["scores"].get<std::vector<double>>();
    ASSERT_EQ(got.size(), idx.size());
    for (std::size_t i = 0; i < got.size(); ++i) {
      EXPECT_EQ(got[i].index, idx[i]);
      EXPECT_EQ(got[i].text, "w" + std::to_string(idx[i]));
      EXPECT_NEAR(got[i].score, scores[i], 1e-12);
    }
  }
}

TEST(ConceptReport, ExhaustiveAndAligned) {
  const auto& s = separable();
  const ModelParams p = untrained(s.train);
  const auto all = concept_report(p, s.test, 0, p.num_concepts());
  std::set<std::size_t> seen;
  for (const auto& c : all) seen.insert(c.index);
  EXPECT_EQ(seen.size(), p.num_concepts());
  for (std::size_t i = 1; i < all.size(); ++i) EXPECT_GE(all[i - 1].score, all[i].score);
  for (std::size_t sample : {0u, 120u, 499u}) {
    const auto top = concept_report(p, s.test, sample, 1);
    EXPECT_EQ(top[0].index, static_cast<std::size_t>(s.test.labels[sample]));
    EXPECT_EQ(top[0].text, "aligned:" + s.test.class_names[top[0].index]);
  }
  EXPECT_THROW(concept_report(p, s.test, 0, p.num_concepts() + 1), ConfigError);
}

TEST(Sweep, SingletonEqualsDirectRun) {
  ExperimentConfig base;
  base.train.epochs = 10;
  const auto rows = sweep({"beta", {0.3}}, synth().train, synth().test, base);
  ExperimentConfig direct = base;
  direct.train.hyperparams.beta = 0.3;
  const auto r = run_experiment(synth().train, synth().test, direct);
  ASSERT_EQ(rows.size(), 1u);
  EXPECT_EQ(rows[0].accuracy, r.report.accuracy);
  EXPECT_EQ(rows[0].seed, base.episode_seed);
}

TEST(Sweep, AlphaZeroEqualsDescriptionAblation) {
  const auto rows = sweep({"alpha", {0.0}}, synth().train, synth().test, ExperimentConfig{});
  ExperimentConfig ablated;
  ablated.train.hyperparams.branches.description = false;
  const auto r = run_experiment(synth().train, synth().test, ablated);
  EXPECT_EQ(rows[0].accuracy, r.report.accuracy);
  EXPECT_DOUBLE_EQ(rows[0].accuracy, kNoDescriptionAcc);
}

TEST(Sweep, DeltaCurveRegression) {
  SweepGrid grid{"delta", {}};
  for (const auto& [d, acc] : kDeltaCurve) grid.values.push_back(d);
  const auto rows = sweep(grid, synth().train, synth().test, ExperimentConfig{});
  ASSERT_EQ(rows.size(), kDeltaCurve.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    EXPECT_EQ(rows[i].value, kDeltaCurve[i].first);
    EXPECT_DOUBLE_EQ(rows[i].accuracy, kDeltaCurve[i].second) << "delta " << rows[i].value;
  }
}

TEST(Sweep, CsvAndValidation) {
  const std::vector<SweepRow> rows = {{"delta", 0.5, 85.8, 1}, {"I", 3, 100.0 / 3.0, 1}};
  EXPECT_EQ(sweep_csv(rows),
            "param,value,accuracy_pct,seed\ndelta,0.5,85.8000,1\nI,3.0,33.3333,1\n");
  EXPECT_THROW(with_param({}, "gamma", 1.0), ConfigError);
  EXPECT_THROW(with_param({}, "shots", 1.5), ConfigError);
  EXPECT_EQ(with_param({}, "shots", 4).shots, 4u);
  EXPECT_EQ(with_param({}, "I", 2).train.hyperparams.top_i, 2u);
  EXPECT_THROW(sweep({"delta", {}}, synth().train, synth().test, {}), ConfigError);
}

TEST(Sweep, ShotsReuseNestedEpisodes) {
  ExperimentConfig base;
  base.train.epochs = 1;
  const auto small = run_experiment(synth().train, synth().test, with_param(base, "shots", 4));
  const auto big = run_experiment(synth().train, synth().test, with_param(base, "shots", 8));
  for (std::size_t n = 0; n < small.episode.indices.size(); ++n) {
    EXPECT_TRUE(std::equal(small.episode.indices[n].begin(), small.episode.indices[n].end(),
                           big.episode.indices[n].begin()));
  }
}

TEST(Report, JsonAndText) {
  const Checkpoint ckpt = load_checkpoint(testing::fixture_path("synth_checkpoint"));
  const EvalReport r = evaluate(ckpt.params, ckpt.config.hyperparams, synth().test);
  const json j = to_json(r);
  EXPECT_EQ(j["accuracy_pct"], r.accuracy);
  EXPECT_EQ(j["num_samples"], 500);
  EXPECT_EQ(j["classes"].size(), 10u);
  EXPECT_TRUE(j["classes"][0]["contribution"].contains("concept"));
  const std::string text = to_text(r);
  EXPECT_NE(text.find("top-1 accuracy: 81.60%"), std::string::npos) << text;
  EXPECT_NE(text.find("class_09"), std::string::npos);
}

}  // namespace
}  // namespace ccli
