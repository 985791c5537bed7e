// Copyright 2026 The CCLI Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <vector>

#include "ccli/concept.hpp"
#include "ccli/feature_store.hpp"
#include "test_support.hpp"

namespace ccli {
namespace {

namespace fs = std::filesystem;

TEST(TopI, Examples) {
  const std::vector<double> sims = {0.9, 0.1, 0.5};
  const auto top = top_i_select(sims, 2);
  EXPECT_EQ(top, (std::vector<TopEntry>{{0, 0.9}, {2, 0.5}}));
  const auto all = top_i_select(sims, 3);
  EXPECT_EQ(all, (std::vector<TopEntry>{{0, 0.9}, {2, 0.5}, {1, 0.1}}));
  const std::vector<double> flat(6, 0.3);
  const auto tied = top_i_select(flat, 4);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(tied[i].index, i);
}

TEST(TopI, Errors) {
  const std::vector<double> sims = {0.9, 0.1};
  EXPECT_THROW(top_i_select(sims, 3), InsufficientSupportError);
  EXPECT_THROW(top_i_select(sims, 0), ConfigError);
}

TEST(TopI, MatchesFullSortOracle) {
  const auto fx = testing::load_fixture("top_i_oracle.json");
  ASSERT_EQ(fx["cases"].size(), 100u);
  for (const auto& c : fx["cases"]) {
    const auto sims = c["sims"].get<std::vector<double>>();
    const auto top = top_i_select(sims, c["count"].get<std::size_t>());
    const auto idx = c["indices"].get<std::vector<std::size_t>>();
    const auto w = c["weights"].get<std::vector<double>>();
    ASSERT_EQ(top.size(), idx.size());
    for (std::size_t i = 0; i < top.size(); ++i) {
      EXPECT_EQ(top[i].index, idx[i]);
      EXPECT_NEAR(top[i].weight, w[i], 1e-12);
    }
  }
}

TEST(DescriptionConcepts, WorkedExample) {
  const Matrix support = Matrix::from_rows({{1, 0}, {0, 1}, {0.6, 0.8}});
  const Matrix text = Matrix::from_rows({{1, 0}});
  const Matrix v = learn_description_concepts(support, text, 2);
  // (1*(1,0) + 0.6*(0.6,0.8)) / 1.6 = (0.85, 0.30)
  const double n = std::hypot(0.85, 0.30);
  EXPECT_NEAR(v(0, 0), 0.85 / n, 1e-15);
  EXPECT_NEAR(v(0, 1), 0.30 / n, 1e-15);
  EXPECT_NEAR(v(0, 0), 0.9429, 1e-4);
  EXPECT_NEAR(v(0, 1), 0.3328, 1e-4);
}

TEST(DescriptionConcepts, IdenticalSupportAndTopOne) {
  const Matrix same = Matrix::from_rows({{0.6, 0.8}, {0.6, 0.8}, {0.6, 0.8}});
  const Matrix text = Matrix::from_rows({{1, 0}, {0, 1}});
  const Matrix v = learn_description_concepts(same, text, 3);
  for (std::size_t k = 0; k < 2; ++k) {
    EXPECT_NEAR(v(k, 0), 0.6, 1e-15);
    EXPECT_NEAR(v(k, 1), 0.8, 1e-15);
  }
  std::mt19937_64 gen(4);
  const Matrix s = testing::random_unit_rows(gen, 9, 5);
  const Matrix t = testing::random_unit_rows(gen, 7, 5);
  const auto mined = mine_description_concepts(s, t, 1);
  for (std::size_t k = 0; k < 7; ++k) {
    const auto src = s.row(mined.top1[k]);
    for (std::size_t c = 0; c < 5; ++c) EXPECT_NEAR(mined.v_cp(k, c), src[c], 1e-15);
  }
}

TEST(DescriptionConcepts, FallbackOnNonPositiveWeights) {
  const Matrix support = Matrix::from_rows({{-1, 0.2}, {-0.8, -0.6}});
  const Matrix text = Matrix::from_rows({{1, 0}});
  const auto mined = mine_description_concepts(l2_normalize_rows(support), text, 2);
  ASSERT_EQ(mined.fallback, std::vector<std::size_t>{0});
  EXPECT_NEAR(norm(mined.v_cp.row(0)), 1.0, 1e-12);
}

TEST(DescriptionConcepts, ConvexCombinationOfTopI) {
  std::mt19937_64 gen(31);
  for (int trial = 0; trial < 30; ++trial) {
    const Matrix s = testing::random_unit_rows(gen, 12, 6);
    const Matrix t = testing::random_unit_rows(gen, 5, 6);
    const std::size_t top_i = 1 + trial % 6;
    const auto mined = mine_description_concepts(s, t, top_i);
    for (std::size_t k = 0; k < t.rows(); ++k) {
      if (std::find(mined.fallback.begin(), mined.fallback.end(), k) != mined.fallback.end()) {
        continue;
      }
      std::vector<double> sims(s.rows());
      for (std::size_t i = 0; i < s.rows(); ++i) sims[i] = dot(t.row(k), s.row(i));
      std::vector<std::size_t> order(s.rows());
      std::iota(order.begin(), order.end(), 0);
      std::sort(order.begin(), order.end(), [&](auto a, auto b) { return sims[a] > sims[b]; });
      std::vector<double> want(6, 0.0);
      for (std::size_t j = 0; j < top_i; ++j) {
        for (std::size_t c = 0; c < 6; ++c) want[c] += sims[order[j]] * s(order[j], c);
      }
      const double n = norm(want);
      for (std::size_t c = 0; c < 6; ++c) EXPECT_NEAR(mined.v_cp(k, c), want[c] / n, 1e-12);
    }
  }
}

TEST(DescriptionConcepts, SupportPermutationInvariant) {
  std::mt19937_64 gen(12);
  const Matrix s = testing::random_unit_rows(gen, 10, 4);
  const Matrix t = testing::random_unit_rows(gen, 6, 4);
  std::vector<std::size_t> perm(10);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), gen);
  Matrix shuffled(10, 4);
  for (std::size_t i = 0; i < 10; ++i) {
    std::copy(s.row(perm[i]).begin(), s.row(perm[i]).end(), shuffled.row(i).begin());
  }
  const Matrix a = learn_description_concepts(s, t, 3);
  const Matrix b = learn_description_concepts(shuffled, t, 3);
  EXPECT_LE(testing::max_rel_error(a, b, 1e-9), 1e-12);
}

TEST(ClassConcepts, Examples) {
  const std::vector<int> two = {0, 0};
  const Matrix m = learn_class_concepts(Matrix::from_rows({{1, 0}, {0, 1}}), two, 1, 2);
  EXPECT_NEAR(m(0, 0), std::sqrt(0.5), 1e-15);
  EXPECT_NEAR(m(0, 1), std::sqrt(0.5), 1e-15);

  const std::vector<int> one = {1, 0};
  const Matrix single = learn_class_concepts(Matrix::from_rows({{0.6, 0.8}, {0, 1}}), one, 2, 1);
  EXPECT_EQ(single, Matrix::from_rows({{0, 1}, {0.6, 0.8}}));

  const std::vector<int> missing = {0};
  EXPECT_THROW(learn_class_concepts(Matrix::from_rows({{1, 0}}), missing, 2, 1),
               InsufficientShotsError);
}

TEST(LearnConcepts, SeparableLimitRecoversClassVectors) {
  SynthSpec spec;
  spec.sigma = 1e-9;
  const SynthBundles s = gen_synth(spec);
  const Episode ep = sample_episode(s.train, 4, 3);
  const ConceptBank bank = learn_concepts(s.train, ep, 4);
  for (std::size_t n = 0; n < spec.num_classes; ++n) {
    EXPECT_EQ(bank.top1_class[n], static_cast<int>(n));
    for (std::size_t c = 0; c < spec.dim; ++c) {
      EXPECT_NEAR(bank.v_cp(n, c), s.train.class_text_features(n, c), 1e-6);
      EXPECT_NEAR(bank.v_mu(n, c), s.train.class_text_features(n, c), 1e-6);
    }
  }
  EXPECT_EQ(bank.provenance.shots, 4u);
  EXPECT_EQ(bank.provenance.episode_seed, 3u);
  EXPECT_EQ(bank.provenance.fingerprint, fingerprint(s.train));
}

TEST(LearnConcepts, TopIBeyondSupportFails) {
  const SynthBundles s = gen_synth({});
  const Episode ep = sample_episode(s.train, 1, 0);
  EXPECT_THROW(learn_concepts(s.train, ep, 11), InsufficientSupportError);
}

TEST(ConceptBank, RoundTrip) {
  const SynthBundles s = gen_synth({});
  const ConceptBank bank = learn_concepts(s.train, sample_episode(s.train, 8, 5), 5);
  const fs::path dir = testing::scratch_dir("bank");
  save_concept_bank(bank, dir);
  const ConceptBank back = load_concept_bank(dir);
  EXPECT_LE(testing::max_rel_error(back.v_cp, bank.v_cp, 1e-3), 1e-6);
  EXPECT_LE(testing::max_rel_error(back.v_mu, bank.v_mu, 1e-3), 1e-6);
  EXPECT_EQ(back.top1_class, bank.top1_class);
  EXPECT_EQ(back.fallback_rows, bank.fallback_rows);
  EXPECT_EQ(back.provenance, bank.provenance);
  EXPECT_THROW(read_bundle(dir), Error);
  fs::remove_all(dir);
}

}  // namespace
}  // namespace ccli
