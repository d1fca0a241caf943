// Copyright 2026 The UpliftRec Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.
#include <gtest/gtest.h>

#include <random>
#include <sstream>

#include "upliftrec/causal.hpp"

using namespace upliftrec;

namespace {

CategoryMap map_of(std::initializer_list<std::pair<const ItemId, int>> pairs, int C) {
  CategoryMap m;
  m.assignment = pairs;
  m.num_categories = C;
  return m;
}

Records trail_of(UserId user, std::initializer_list<std::pair<ItemId, int>> items) {
  Records r;
  std::int64_t pos = 0;
  for (auto [item, label] : items) r.push_back({user, item, label, pos++});
  return r;
}

AugmentedSample sample(std::vector<double> t, std::vector<double> y, std::vector<char> obs,
                       UserId source = 0) {
  AugmentedSample s;
  s.source_user = source;
  s.treatment.ratios = std::move(t);
  s.outcome.ctr = std::move(y);
  s.outcome.observed = std::move(obs);
  return s;
}

PropensityMatrix constant_propensity(int C, int K, double v) {
  PropensityMatrix P;
  P.p = Grid<double>(static_cast<std::size_t>(C), static_cast<std::size_t>(K) + 1, v);
  P.raw = P.p;
  return P;
}

}  // namespace

TEST(SplitTrail, CeilingRule) {
  Records eight, five;
  for (int i = 0; i < 8; ++i) eight.push_back({0, i, 0, i});
  for (int i = 0; i < 5; ++i) five.push_back({0, i, 0, i});
  auto a = split_trail(eight, 0.5);
  ASSERT_TRUE(a);
  EXPECT_EQ(a->history.size(), 4u);
  EXPECT_EQ(a->window.size(), 4u);
  auto b = split_trail(five, 0.5);
  ASSERT_TRUE(b);
  EXPECT_EQ(b->history.size(), 3u);
  EXPECT_EQ(b->window.size(), 2u);
  EXPECT_FALSE(split_trail(Records{{0, 1, 1, 0}}, 0.5));
  EXPECT_FALSE(split_trail(five, 0.9));  // ceil(4.5) = 5 leaves no window
  EXPECT_THROW(split_trail(five, 1.0), DomainError);
}

TEST(SplitTrail, HistoryPrecedesWindow) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 200; ++trial) {
    Records t;
    const int n = 2 + static_cast<int>(rng() % 30);
    for (int i = 0; i < n; ++i) t.push_back({0, i, 0, i * 2});
    const double lambda = 0.05 + 0.9 * static_cast<double>(rng() % 1000) / 1000.0;
    auto s = split_trail(t, lambda);
    if (!s) continue;
    EXPECT_FALSE(s->window.empty());
    EXPECT_LT(s->history.back().position, s->window.front().position);
  }
}

TEST(Treatment, RatiosPerCategory) {
  const auto cats = map_of({{1, 0}, {2, 0}, {3, 1}, {4, 2}, {5, 2}}, 3);
  const auto w = trail_of(0, {{1, 0}, {2, 1}, {3, 0}, {4, 0}, {5, 1}});
  const auto t = compute_treatment(w, cats, 3);
  EXPECT_DOUBLE_EQ(t.ratios[0], 0.4);
  EXPECT_DOUBLE_EQ(t.ratios[1], 0.2);
  EXPECT_DOUBLE_EQ(t.ratios[2], 0.4);
  const auto all0 = compute_treatment(trail_of(0, {{1, 0}, {2, 0}}), cats, 3);
  EXPECT_EQ(all0.ratios, (std::vector<double>{1.0, 0.0, 0.0}));
  EXPECT_THROW(compute_treatment(Records{}, cats, 3), DomainError);
}

TEST(Treatment, SumsToOneOnRandomWindows) {
  std::mt19937_64 rng(1);
  CategoryMap cats;
  cats.num_categories = 5;
  for (ItemId i = 0; i < 100; ++i) cats.assignment[i] = static_cast<int>(rng() % 5);
  for (int trial = 0; trial < 1000; ++trial) {
    Records w;
    const int n = 1 + static_cast<int>(rng() % 20);
    for (int i = 0; i < n; ++i) w.push_back({0, static_cast<ItemId>(rng() % 100), static_cast<int>(rng() % 2), i});
    const auto t = compute_treatment(w, cats, 5);
    double s = 0;
    for (double x : t.ratios) s += x;
    EXPECT_NEAR(s, 1.0, 1e-9);
    const auto y = compute_outcome(w, cats, 5);
    for (std::size_t c = 0; c < 5; ++c) {
      if (!y.observed[c]) continue;
      EXPECT_GE(y.ctr[c], 0.0);
      EXPECT_LE(y.ctr[c], 1.0);
    }
  }
}

TEST(Outcome, ObservedOnlyWhereExposed) {
  const auto cats = map_of({{1, 0}, {2, 0}, {3, 0}, {4, 0}, {5, 1}, {6, 2}}, 3);
  const auto w = trail_of(0, {{1, 1}, {2, 0}, {3, 1}, {4, 0}, {5, 0}});
  const auto y = compute_outcome(w, cats, 3);
  EXPECT_EQ(y.ctr[0], 0.5);
  EXPECT_EQ(y.ctr[1], 0.0);
  EXPECT_EQ(y.observed, (std::vector<char>{1, 1, 0}));
  const auto all = compute_outcome(trail_of(0, {{1, 1}, {5, 1}}), cats, 3);
  EXPECT_EQ(all.ctr[0], 1.0);
  EXPECT_EQ(all.ctr[1], 1.0);
}

TEST(Discretize, ScalarHalfUp) {
  EXPECT_EQ(discretize(0.0, 5), 0);
  EXPECT_EQ(discretize(1.0, 5), 5);
  EXPECT_EQ(discretize(0.3, 5), 2);  // 1.5 rounds up
  EXPECT_EQ(discretize(0.1, 5), 1);  // 0.5 rounds up
  EXPECT_EQ(discretize(0.29, 5), 1);
}

TEST(Discretize, VectorSumsToK) {
  EXPECT_EQ(discretize(TreatmentVector{{0.4, 0.2, 0.4}}, 5).slots, (std::vector<int>{2, 1, 2}));
  // Five-item window with 2, 0 and 3 items per category.
  EXPECT_EQ(discretize(TreatmentVector{{0.4, 0.0, 0.6}}, 5).slots, (std::vector<int>{2, 0, 3}));
  // Rounding alone would give (1, 1, 1) for thirds of K = 4.
  EXPECT_EQ(discretize(TreatmentVector{{1.0 / 3, 1.0 / 3, 1.0 / 3}}, 4).total(), 4);
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u;
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<double> t(4);
    double s = 0;
    for (auto& x : t) s += (x = u(rng));
    for (auto& x : t) x /= s;
    const int K = 1 + static_cast<int>(rng() % 12);
    const auto d = discretize(TreatmentVector{t}, K);
    EXPECT_EQ(d.total(), K);
    for (std::size_t c = 0; c < 4; ++c) EXPECT_LE(std::abs(d.slots[c] - t[c] * K), 1.0 + 1e-9);
  }
}

TEST(Augment, OneSamplePerEligibleUser) {
  const auto cats = map_of({{1, 0}, {2, 1}}, 2);
  std::vector<Trail> trails{{0, trail_of(0, {{1, 1}, {2, 0}, {1, 0}, {2, 1}})},
                            {1, trail_of(1, {{1, 1}})},
                            {2, trail_of(2, {{2, 1}, {1, 1}})}};
  std::size_t skipped = 0;
  const auto s = build_augmented_dataset(trails, 0.5, cats, &skipped);
  ASSERT_EQ(s.size(), 2u);
  EXPECT_EQ(skipped, 1u);
  EXPECT_EQ(s[0].source_user, 0);
  EXPECT_EQ(s[1].source_user, 2);
  EXPECT_EQ(s[1].sample_id, 1u);
  EXPECT_EQ(s[0].history.size(), 2u);
  EXPECT_EQ(s[0].treatment.ratios, (std::vector<double>{0.5, 0.5}));
  std::vector<Trail> none{{1, trail_of(1, {{1, 1}})}};
  EXPECT_THROW(build_augmented_dataset(none, 0.5, cats), DomainError);
}

TEST(Augment, FileRoundTrip) {
  const auto cats = map_of({{1, 0}, {2, 1}, {3, 2}}, 3);
  std::vector<Trail> trails{{4, trail_of(4, {{1, 1}, {2, 0}, {3, 0}, {2, 1}, {1, 0}})},
                            {9, trail_of(9, {{3, 1}, {3, 0}})}};
  const auto s = build_augmented_dataset(trails, 0.5, cats);
  std::stringstream ss;
  write_augmented(ss, s);
  EXPECT_EQ(read_augmented(ss), s);
}

TEST(Propensity, AllNeighborsInOneSlot) {
  std::vector<DiscreteTreatment> nb(10, DiscreteTreatment{{2, 3}, 5});
  const auto P = estimate_propensity(nb, 2, 5, 0.05);
  EXPECT_EQ(P(0, 2), 1.0);
  EXPECT_EQ(P(0, 0), 0.05);
  EXPECT_EQ(P.raw(0, 0), 0.0);
  EXPECT_EQ(P(1, 3), 1.0);
}

TEST(Propensity, UniformNeighbors) {
  std::vector<DiscreteTreatment> nb;
  for (int k = 0; k <= 5; ++k) nb.push_back({{k, 5 - k}, 5});
  const auto P = estimate_propensity(nb, 2, 5, 0.05);
  for (std::size_t k = 0; k <= 5; ++k) EXPECT_DOUBLE_EQ(P.raw(0, k), 1.0 / 6);
}

TEST(Propensity, RowsSumToOneAndRespectFloor) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 200; ++trial) {
    const int C = 1 + static_cast<int>(rng() % 5), K = 1 + static_cast<int>(rng() % 8);
    std::vector<DiscreteTreatment> nb(1 + rng() % 50);
    for (auto& t : nb) {
      t.K = K;
      for (int c = 0; c < C; ++c) t.slots.push_back(static_cast<int>(rng() % (K + 1)));
    }
    const double vp = 0.01 * static_cast<double>(rng() % 10);
    const auto P = estimate_propensity(nb, C, K, vp);
    for (std::size_t c = 0; c < static_cast<std::size_t>(C); ++c) {
      double s = 0;
      for (std::size_t k = 0; k <= static_cast<std::size_t>(K); ++k) {
        s += P.raw(c, k);
        EXPECT_GE(P(c, k), vp);
      }
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
  EXPECT_THROW(estimate_propensity(std::vector<DiscreteTreatment>{}, 2, 5, 0.05), DomainError);
}

TEST(Adrf, SlotMeanDividedByTargetPropensity) {
  // Three neighbors with category 0 at slot 2 of K = 5.
  std::vector<AugmentedSample> nb{sample({0.4, 0.6}, {0.2, 0.0}, {1, 1}),
                                   sample({0.4, 0.6}, {0.4, 0.0}, {1, 1}),
                                   sample({0.4, 0.6}, {0.6, 0.0}, {1, 1})};
  auto P = constant_propensity(2, 5, 0.5);
  const auto A = estimate_adrf(nb, P, 1.0, 0.01, 2, 5);
  EXPECT_NEAR(A(0, 2), 0.8, 1e-12);
  EXPECT_TRUE(A.filled(0, 2));
  const auto plain = estimate_adrf(nb, P, 0.0, 0.01, 2, 5);
  EXPECT_NEAR(plain(0, 2), 0.4, 1e-12);
  EXPECT_EQ(plain(0, 1), 0.01);
  EXPECT_FALSE(plain.filled(0, 1));
  for (std::size_t c = 0; c < 2; ++c) EXPECT_EQ(A(c, 0), 0.0);
}

TEST(Adrf, UnobservedOutcomesAreExcluded) {
  std::vector<AugmentedSample> nb{sample({0.4, 0.6}, {0.2, 0.0}, {1, 1}),
                                   sample({0.4, 0.6}, {0.0, 0.0}, {0, 1})};
  const auto A = estimate_adrf(nb, constant_propensity(2, 5, 1.0), 0.0, 0.01, 2, 5);
  EXPECT_NEAR(A(0, 2), 0.2, 1e-12);
}

TEST(Adrf, MonotoneInGammaAndBounded) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u;
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<AugmentedSample> nb;
    std::vector<DiscreteTreatment> slots;
    for (int j = 0; j < 30; ++j) {
      std::vector<double> t{u(rng), u(rng), u(rng)};
      const double s = t[0] + t[1] + t[2];
      for (auto& x : t) x /= s;
      nb.push_back(sample(t, {u(rng), u(rng), u(rng)}, {1, static_cast<char>(rng() % 2), 1}));
      slots.push_back(discretize(nb.back().treatment, 5));
    }
    const auto P = estimate_propensity(slots, 3, 5, 0.05);
    const auto A0 = estimate_adrf(nb, P, 0.0, 0.01, 3, 5);
    const auto A1 = estimate_adrf(nb, P, 1.0, 0.01, 3, 5);
    for (std::size_t c = 0; c < 3; ++c) {
      EXPECT_EQ(A0(c, 0), 0.0);
      for (std::size_t k = 1; k <= 5; ++k) {
        if (!A0.filled(c, k)) {
          EXPECT_EQ(A0(c, k), 0.01);
          continue;
        }
        EXPECT_GE(A0(c, k), 0.0);
        EXPECT_LE(A0(c, k), 1.0);
        EXPECT_GE(A1(c, k), A0(c, k));
      }
    }
  }
}

TEST(AdrfWeighted, GammaZeroIsThePlainMean) {
  std::vector<AugmentedSample> nb{sample({0.4, 0.6}, {0.2, 0.1}, {1, 1}),
                                   sample({0.4, 0.6}, {0.6, 0.3}, {1, 1})};
  const auto P = constant_propensity(2, 5, 0.3);
  const auto A = estimate_adrf_weighted(
      nb, [&](const AugmentedSample&) -> const PropensityMatrix& { return P; }, 0.0, 0.01, 2, 5);
  EXPECT_NEAR(A(0, 2), 0.4, 1e-12);
  EXPECT_NEAR(A(1, 3), 0.2, 1e-12);
  EXPECT_EQ(A(0, 0), 0.0);
}

TEST(AdrfWeighted, DownweightsOverRepresentedNeighbors) {
  std::vector<AugmentedSample> nb{sample({0.4, 0.6}, {0.0, 0.0}, {1, 1}, 1),
                                   sample({0.4, 0.6}, {1.0, 0.0}, {1, 1}, 2)};
  const auto common = constant_propensity(2, 5, 0.8);
  const auto rare = constant_propensity(2, 5, 0.2);
  auto prop = [&](const AugmentedSample& s) -> const PropensityMatrix& {
    return s.source_user == 1 ? common : rare;
  };
  const auto A = estimate_adrf_weighted(nb, prop, 1.0, 0.01, 2, 5);
  // weights 1/0.8 and 1/0.2 -> (0 * 1.25 + 1 * 5) / 6.25
  EXPECT_NEAR(A(0, 2), 0.8, 1e-12);
}

TEST(Mtef, WorkedCaseStudy) {
  AdrfMatrix A;
  A.null_value = 0.01;
  A.value = Grid<double>(3, 6, 0.01);
  A.filled = Grid<char>(3, 6, 0);
  for (std::size_t c = 0; c < 3; ++c) A.value(c, 0) = 0.0;
  auto fill = [&](std::size_t c, std::size_t k, double v) {
    A.value(c, k) = v;
    A.filled(c, k) = 1;
  };
  fill(0, 1, 0.36);
  fill(1, 1, 0.1);
  fill(1, 2, 0.2);
  fill(2, 4, 0.5);
  const auto m = compute_mtef(A, DiscreteTreatment{{0, 1, 4}, 5}, 1, 0.05);
  EXPECT_EQ(m.m[0], 0.36);
  EXPECT_EQ(m.m[1], 0.1);
  EXPECT_EQ(m.m[2], 0.05);
  EXPECT_EQ(m.filled, (std::vector<char>{1, 1, 0}));
}

TEST(Mtef, FlatRowAndBoundary) {
  AdrfMatrix A;
  A.value = Grid<double>(2, 6, 0.3);
  A.filled = Grid<char>(2, 6, 1);
  A.value(0, 0) = A.value(1, 0) = 0.0;
  const auto m = compute_mtef(A, DiscreteTreatment{{2, 5}, 5}, 1, 0.05);
  EXPECT_EQ(m.m[0], 0.0);
  EXPECT_EQ(m.m[1], 0.05);
  const auto m2 = compute_mtef(A, DiscreteTreatment{{1, 4}, 5}, 2, 0.05);
  EXPECT_EQ(m2.m[0], 0.0);
  EXPECT_EQ(m2.m[1], 0.05);
  EXPECT_THROW(compute_mtef(A, DiscreteTreatment{{1, 4}, 5}, 0, 0.05), DomainError);
}

TEST(Mtef, EqualsDiscreteDifferenceWhereFilled) {
  std::mt19937_64 rng(12);
  std::uniform_real_distribution<double> u;
  for (int trial = 0; trial < 200; ++trial) {
    AdrfMatrix A;
    A.value = Grid<double>(4, 7, 0.02);
    A.filled = Grid<char>(4, 7, 0);
    for (std::size_t c = 0; c < 4; ++c) {
      A.value(c, 0) = 0.0;
      for (std::size_t k = 1; k < 7; ++k)
        if (rng() % 2) {
          A.value(c, k) = u(rng);
          A.filled(c, k) = 1;
        }
    }
    DiscreteTreatment t0{{static_cast<int>(rng() % 7), static_cast<int>(rng() % 7),
                          static_cast<int>(rng() % 7), static_cast<int>(rng() % 7)}, 6};
    const int delta = 1 + static_cast<int>(rng() % 2);
    const auto m = compute_mtef(A, t0, delta, 0.05);
    for (std::size_t c = 0; c < 4; ++c) {
      const auto from = static_cast<std::size_t>(t0.slots[c]), to = from + static_cast<std::size_t>(delta);
      if (to <= 6 && A.known(c, from) && A.known(c, to)) {
        EXPECT_EQ(m.m[c], (A(c, to) - A(c, from)) / delta);
      } else {
        EXPECT_EQ(m.m[c], 0.05);
      }
    }
  }
}

TEST(HyperParams, Validation) {
  HyperParams hp;
  EXPECT_NO_THROW(hp.validate(false));
  hp.K = 20;
  EXPECT_THROW(hp.validate(false), DomainError);  // K > N
  hp = HyperParams{};
  hp.alpha = 0.0;
  EXPECT_THROW(hp.validate(false), DomainError);
  EXPECT_NO_THROW(hp.validate(true));
  hp.lambda = 1.0;
  EXPECT_THROW(hp.validate(true), DomainError);
}
