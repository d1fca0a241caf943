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

#include <map>
#include <random>
#include <sstream>

#include "oracles.hpp"
#include "upliftrec/synth.hpp"

using namespace upliftrec;

namespace {

SyntheticWorld one_user_world(std::vector<double> peak, std::vector<double> base,
                              std::vector<double> width, int ipc = 10) {
  SyntheticWorld w;
  w.C = static_cast<int>(peak.size());
  w.items_per_category = ipc;
  UserTruth u{std::move(peak), std::move(base), std::move(width), 0};
  u.dominant = static_cast<int>(std::max_element(u.base.begin(), u.base.end()) - u.base.begin());
  w.users.push_back(std::move(u));
  return w;
}

// Category counts of each consecutive window of `len` records.
std::vector<std::vector<int>> window_counts(const SyntheticWorld& w, const Records& r, int len) {
  std::vector<std::vector<int>> out;
  for (std::size_t s = 0; s + static_cast<std::size_t>(len) <= r.size(); s += static_cast<std::size_t>(len)) {
    std::vector<int> counts(static_cast<std::size_t>(w.C), 0);
    for (std::size_t i = s; i < s + static_cast<std::size_t>(len); ++i) ++counts[static_cast<std::size_t>(w.category_of(r[i].item))];
    out.push_back(counts);
  }
  return out;
}

}  // namespace

TEST(TrueCtr, ClosedForms) {
  const auto w = one_user_world({0.5, 0.3}, {0.8, 0.4}, {0.5, 0.2});
  EXPECT_EQ(true_ctr(w, 0, 0, 0.5), 0.8);
  EXPECT_EQ(true_ctr(w, 0, 0, 0.0), 0.0);
  EXPECT_EQ(true_ctr(w, 0, 1, 0.5), 0.0);
  EXPECT_EQ(true_ctr(w, 0, 1, 0.9), 0.0);
  EXPECT_NEAR(true_ctr(w, 0, 0, 0.25), 0.8 * 0.75, 1e-15);
}

TEST(World, DrawsWithinConfiguredRanges) {
  WorldConfig cfg;
  cfg.num_users = 200;
  cfg.C = 4;
  const auto w = make_world(cfg);
  ASSERT_EQ(w.users.size(), 200u);
  for (const auto& u : w.users) {
    for (int c = 0; c < 4; ++c) {
      const auto cc = static_cast<std::size_t>(c);
      EXPECT_GE(u.base[cc], cfg.base_lo);
      EXPECT_LE(u.base[cc], 1.0);
      EXPECT_LE(u.base[cc], u.base[static_cast<std::size_t>(u.dominant)]);
      for (double t = 0; t <= 1.0; t += 0.05) {
        const double y = true_ctr(w, 0, c, t);
        EXPECT_GE(y, 0.0);
        EXPECT_LE(y, 1.0);
      }
    }
  }
  EXPECT_EQ(w.catalog().size(), 200u);
  EXPECT_EQ(w.categories().at(w.item(3, 7)), 3);
}

TEST(SimulateLogs, UniformPolicyCoversCompositionsEvenly) {
  const auto w = one_user_world({0.5, 0.5, 0.5}, {0.3, 0.2, 0.1}, {0.6, 0.6, 0.6});
  const int len = 5;
  const auto trails = simulate_logs(w, LoggingPolicy::uniform(), 100000, len, 7);
  std::map<std::vector<int>, int> freq;
  for (const auto& c : window_counts(w, trails[0].records, len)) ++freq[c];
  const auto all = oracle::compositions(3, len);
  ASSERT_EQ(freq.size(), all.size());
  for (const auto& c : all) {
    EXPECT_NEAR(freq[c] / 100000.0, 1.0 / static_cast<double>(all.size()), 0.02);
  }
}

TEST(SimulateLogs, MarginalsMatchExactProbabilities) {
  const auto w = one_user_world({0.5, 0.5, 0.5}, {0.1, 0.5, 0.2}, {0.6, 0.6, 0.6});
  const int len = 5;
  for (double strength : {0.0, 0.7}) {
    const auto policy = LoggingPolicy::confounded(strength);
    const auto trails = simulate_logs(w, policy, 100000, len, 9);
    std::vector<std::vector<double>> freq(3, std::vector<double>(len + 1, 0.0));
    const auto windows = window_counts(w, trails[0].records, len);
    for (const auto& c : windows)
      for (int k = 0; k < 3; ++k) freq[static_cast<std::size_t>(k)][static_cast<std::size_t>(c[static_cast<std::size_t>(k)])] += 1.0 / windows.size();
    for (int c = 0; c < 3; ++c) {
      double total = 0;
      for (int k = 0; k <= len; ++k) {
        const double p = policy_count_probability(policy, w.users[0].dominant, 3, len, c, k);
        total += p;
        EXPECT_NEAR(freq[static_cast<std::size_t>(c)][static_cast<std::size_t>(k)], p, 0.01);
        EXPECT_GT(p, 0.0);  // overlap: every slot reachable
      }
      EXPECT_NEAR(total, 1.0, 1e-12);
    }
  }
}

TEST(SimulateLogs, StrengthZeroIsUniform) {
  WorldConfig cfg;
  cfg.num_users = 20;
  const auto w = make_world(cfg);
  const auto a = simulate_logs(w, LoggingPolicy::uniform(), 3, 10, 5);
  const auto b = simulate_logs(w, LoggingPolicy::confounded(0.0), 3, 10, 5);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t u = 0; u < a.size(); ++u) EXPECT_EQ(a[u].records, b[u].records);
}

TEST(SimulateLogs, DeterministicAndValidated) {
  WorldConfig cfg;
  cfg.num_users = 10;
  const auto w = make_world(cfg);
  const auto a = simulate_logs(w, LoggingPolicy::confounded(0.5), 2, 8, 1);
  const auto b = simulate_logs(w, LoggingPolicy::confounded(0.5), 2, 8, 1);
  for (std::size_t u = 0; u < a.size(); ++u) EXPECT_EQ(a[u].records, b[u].records);
  EXPECT_THROW(simulate_logs(w, LoggingPolicy::confounded(1.0), 2, 8, 1), DomainError);
  EXPECT_THROW(simulate_logs(w, LoggingPolicy::confounded(-0.1), 2, 8, 1), DomainError);
}

TEST(SimulateLogs, ClickRateConvergesToTruth) {
  const auto w = one_user_world({0.4, 0.7, 0.2}, {0.6, 0.5, 0.3}, {0.7, 0.8, 0.5});
  const int len = 5;
  const auto trails = simulate_logs(w, LoggingPolicy::confounded(0.5), 100000, len, 3);
  const auto& recs = trails[0].records;
  // clicks / exposures per (category, count-in-window)
  std::map<std::pair<int, int>, std::pair<double, double>> acc;
  const auto windows = window_counts(w, recs, len);
  for (std::size_t wi = 0; wi < windows.size(); ++wi) {
    for (std::size_t i = wi * len; i < (wi + 1) * len; ++i) {
      const int c = w.category_of(recs[i].item);
      auto& a = acc[{c, windows[wi][static_cast<std::size_t>(c)]}];
      a.first += recs[i].label;
      a.second += 1;
    }
  }
  for (const auto& [key, a] : acc) {
    if (a.second < 20000) continue;  // enough exposures for a +-0.01 check
    const double truth = true_ctr(w, 0, key.first, static_cast<double>(key.second) / len);
    EXPECT_NEAR(a.first / a.second, truth, 0.01) << "category " << key.first << " count " << key.second;
  }
}

TEST(RandomExposure, DistinctItemsPerUser) {
  WorldConfig cfg;
  cfg.num_users = 30;
  const auto w = make_world(cfg);
  const auto r = simulate_random_exposure(w, 20, 4);
  EXPECT_EQ(r.size(), 600u);
  std::map<UserId, std::set<ItemId>> seen;
  for (const auto& x : r) EXPECT_TRUE(seen[x.user].insert(x.item).second);
  EXPECT_THROW(simulate_random_exposure(w, 151, 4), DomainError);
}

TEST(Oracle, SingleValuableCategoryTakesEverything) {
  const auto w = one_user_world({1.0, 0.5, 0.5}, {1.0, 0.0, 0.0}, {1.0, 0.5, 0.5});
  const auto plan = oracle_best_treatment(w, 0, 5, 10);
  EXPECT_EQ(plan.slots.slots, (std::vector<int>{5, 0, 0}));
  EXPECT_DOUBLE_EQ(plan.value, 10.0);
}

TEST(Oracle, SymmetricUsersCompareByValue) {
  const auto w = one_user_world({0.5, 0.5}, {0.4, 0.4}, {0.5, 0.5});
  const auto plan = oracle_best_treatment(w, 0, 4, 10);
  auto value = [&](std::vector<int> s) {
    double v = 0;
    for (int c = 0; c < 2; ++c) {
      const double t = s[static_cast<std::size_t>(c)] / 4.0;
      v += t * 10 * true_ctr(w, 0, c, t);
    }
    return v;
  };
  EXPECT_EQ(plan.value, value(plan.slots.slots));
  std::vector<int> mirrored{plan.slots.slots[1], plan.slots.slots[0]};
  EXPECT_DOUBLE_EQ(value(mirrored), plan.value);
}

TEST(Oracle, DominatesRandomAllocations) {
  WorldConfig cfg;
  cfg.num_users = 10;
  cfg.C = 4;
  const auto w = make_world(cfg);
  std::mt19937_64 rng(2);
  for (std::size_t u = 0; u < w.users.size(); ++u) {
    const auto plan = oracle_best_treatment(w, u, 8, 10);
    for (int trial = 0; trial < 100; ++trial) {
      const auto s = random_composition(8, 4, rng);
      double v = 0;
      for (int c = 0; c < 4; ++c) {
        const double t = s[static_cast<std::size_t>(c)] / 8.0;
        v += t * 10 * true_ctr(w, u, c, t);
      }
      EXPECT_GE(plan.value, v);
    }
  }
  SyntheticWorld big = w;
  big.C = 7;
  EXPECT_THROW(oracle_best_treatment(big, 0, 5, 10), DomainError);
  EXPECT_THROW(oracle_best_treatment(w, 0, 11, 10), DomainError);
}

TEST(Truth, FileHasOneRowPerUserCategory) {
  WorldConfig cfg;
  cfg.num_users = 3;
  const auto w = make_world(cfg);
  std::ostringstream out;
  write_truth(out, w);
  std::istringstream in(out.str());
  std::string line;
  int rows = 0;
  while (std::getline(in, line))
    if (!line.empty() && line[0] != '#') ++rows;
  EXPECT_EQ(rows, 9);
}
