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

#include <cstdlib>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include "oracles.hpp"
#include "upliftrec/data.hpp"

using namespace upliftrec;

namespace {
Records parse(const std::string& text, bool pos = false) {
  std::istringstream in(text);
  return parse_interactions(in, pos);
}
}  // namespace

TEST(ParseInteractions, NoPositionColumnNumbersPerUser) {
  const auto r = parse("7\t12\t1\n8\t3\t0\n7\t13\t0\n");
  ASSERT_EQ(r.size(), 3u);
  EXPECT_EQ(r[0], (InteractionRecord{7, 12, 1, 0}));
  EXPECT_EQ(r[1].position, 0);
  EXPECT_EQ(r[2], (InteractionRecord{7, 13, 0, 1}));
}

TEST(ParseInteractions, LabelOutsideBinaryIsDomainError) {
  EXPECT_THROW(parse("7\t12\t2\n"), DomainError);
}

TEST(ParseInteractions, MalformedLineReportsLineNumber) {
  try {
    parse("1\t2\t1\n# comment\n1\t2\n");
    FAIL() << "expected a parse error";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 3u);
  }
  EXPECT_THROW(parse("1\tx\t1\n"), ParseError);
}

TEST(ParseInteractions, DuplicatePositionRejected) {
  EXPECT_THROW(parse("1\t2\t1\t0\n1\t3\t0\t0\n", true), DomainError);
  EXPECT_NO_THROW(parse("1\t2\t1\t0\n2\t3\t0\t0\n", true));
}

TEST(ParseInteractions, WriteThenParseRoundTrips) {
  std::mt19937_64 rng(3);
  Records recs;
  for (int u = 0; u < 20; ++u)
    for (int p = 0; p < 7; ++p)
      recs.push_back({u * 13, static_cast<ItemId>(rng() % 1000), static_cast<int>(rng() % 2), p * 3});
  std::ostringstream out;
  write_interactions(out, recs);
  EXPECT_EQ(parse(out.str(), true), recs);
  std::ostringstream again;
  write_interactions(again, parse(out.str(), true));
  EXPECT_EQ(again.str(), out.str());
}

TEST(RatingMatrix, ThresholdsRatings) {
  std::istringstream in("0 5 3\n4 0 1\n");
  const auto r = parse_rating_matrix(in, 4);
  ASSERT_EQ(r.size(), 4u);
  EXPECT_EQ(r[0], (InteractionRecord{0, 1, 1, 0}));
  EXPECT_EQ(r[1], (InteractionRecord{0, 2, 0, 1}));
  EXPECT_EQ(r[2], (InteractionRecord{1, 0, 1, 0}));
  EXPECT_EQ(r[3], (InteractionRecord{1, 2, 0, 1}));
}

TEST(SplitUnbiased, PartitionsAndIsDeterministic) {
  Records recs;
  for (int i = 0; i < 100; ++i) recs.push_back({i % 10, i, i % 2, i / 10});
  auto [v1, t1] = split_unbiased(recs, 0.5, 1);
  auto [v2, t2] = split_unbiased(recs, 0.5, 1);
  EXPECT_EQ(v1, v2);
  EXPECT_EQ(t1, t2);
  EXPECT_EQ(v1.size() + t1.size(), 100u);
  std::set<ItemId> seen;
  for (const auto& r : v1) seen.insert(r.item);
  for (const auto& r : t1) EXPECT_FALSE(seen.count(r.item));
  for (const auto& r : t1) seen.insert(r.item);
  EXPECT_EQ(seen.size(), 100u);
  // Each user contributes half of their ten records to validation.
  std::map<UserId, int> per_user;
  for (const auto& r : v1) ++per_user[r.user];
  for (const auto& [u, n] : per_user) EXPECT_EQ(n, 5);
}

TEST(SplitUnbiased, DegenerateInputsRejected) {
  Records recs{{1, 1, 1, 0}, {1, 2, 0, 1}};
  EXPECT_THROW(split_unbiased(recs, 0.0, 1), DomainError);
  EXPECT_THROW(split_unbiased(recs, 1.0, 1), DomainError);
  EXPECT_THROW(split_unbiased(Records{}, 0.5, 1), DomainError);
}

TEST(Popularity, BottomNinetyPercent) {
  Records train;
  std::vector<ItemId> catalog;
  for (int i = 0; i < 10; ++i) {
    catalog.push_back(i);
    for (int k = 0; k < 9 - i; ++k) train.push_back({k, i, k % 2, i});
  }
  const auto table = build_popularity(train, catalog);
  int flagged = 0;
  for (ItemId i : catalog) flagged += table.is_unpopular(i);
  EXPECT_EQ(flagged, 9);
  EXPECT_FALSE(table.is_unpopular(0));
  EXPECT_TRUE(table.is_unpopular(9));
  EXPECT_EQ(table.count_of(9), 0);
}

TEST(Popularity, TiesAreUnpopular) {
  Records train;
  std::vector<ItemId> catalog{1, 2, 3, 4};
  for (ItemId i : catalog) train.push_back({0, i, 1, i});
  const auto table = build_popularity(train, catalog);
  for (ItemId i : catalog) EXPECT_TRUE(table.is_unpopular(i));
}

TEST(Popularity, AbsentItemCountsZero) {
  Records train{{0, 1, 1, 0}, {1, 1, 0, 0}};
  std::vector<ItemId> catalog{1, 2};
  const auto table = build_popularity(train, catalog);
  EXPECT_EQ(table.count_of(2), 0);
  EXPECT_TRUE(table.is_unpopular(2));
  EXPECT_TRUE(table.is_unpopular(999));
}

TEST(Popularity, MatchesOracleAndLowerBound) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 100; ++trial) {
    const int n = 1 + static_cast<int>(rng() % 40);
    std::vector<ItemId> catalog;
    Records train;
    std::map<ItemId, long> counts;
    for (int i = 0; i < n; ++i) {
      catalog.push_back(i);
      const int c = static_cast<int>(rng() % 6);
      counts[i] = c;
      for (int k = 0; k < c; ++k) train.push_back({k, i, 0, i});
    }
    const auto table = build_popularity(train, catalog);
    const auto flags = oracle::unpopular_flags(counts);
    int flagged = 0;
    for (ItemId i : catalog) {
      EXPECT_EQ(table.is_unpopular(i), flags.at(i));
      flagged += table.is_unpopular(i);
    }
    EXPECT_GE(flagged, (9 * n) / 10);
  }
}

TEST(Categories, DenseRemapFirstSeen) {
  std::istringstream in("1\tA\n2\tB\n3\tA\n");
  const auto m = load_categories(in);
  EXPECT_EQ(m.num_categories, 2);
  EXPECT_EQ(m.at(1), 0);
  EXPECT_EQ(m.at(2), 1);
  EXPECT_EQ(m.at(3), 0);
  EXPECT_THROW(m.at(4), DomainError);
  const std::vector<ItemId> catalog{1, 2, 3, 4};
  EXPECT_THROW(m.require_total(catalog), DomainError);
}

TEST(Categories, SingleCategoryAndConflicts) {
  std::istringstream one("5\tx\n6\tx\n");
  EXPECT_EQ(load_categories(one).num_categories, 1);
  std::istringstream clash("5\tx\n5\ty\n");
  EXPECT_THROW(load_categories(clash), DomainError);
  std::istringstream same("5\tx\n5\tx\n");
  EXPECT_NO_THROW(load_categories(same));
}

TEST(Trails, OrderedByPosition) {
  Records recs{{2, 1, 0, 5}, {1, 9, 1, 1}, {2, 3, 1, 0}, {1, 8, 0, 0}};
  const auto trails = group_trails(recs);
  ASSERT_EQ(trails.size(), 2u);
  EXPECT_EQ(trails[0].user, 1);
  EXPECT_EQ(trails[0].records[0].item, 8);
  EXPECT_EQ(trails[1].records[0].item, 3);
}

TEST(Reindex, DenseAndReversible) {
  DatasetSplit split;
  split.train = {{100, 7, 1, 0}, {50, 9, 0, 0}};
  split.valid = {{100, 11, 1, 0}};
  split.test = {{77, 7, 0, 0}};
  const std::vector<ItemId> extra{42};
  const auto ids = reindex(split, extra);
  EXPECT_EQ(ids.users.size(), 3u);
  EXPECT_EQ(ids.items.size(), 4u);
  EXPECT_EQ(split.train[0].user, 0);
  EXPECT_EQ(split.test[0].user, 2);
  EXPECT_EQ(split.test[0].item, split.train[0].item);
  EXPECT_EQ(ids.items.to_original(3), 42);
  EXPECT_EQ(ids.users.to_dense(77), 2);
  EXPECT_THROW(ids.users.to_dense(1), DomainError);
}

// Runs only when a converted copy of Coat is available.
TEST(Coat, IngestCounts) {
  const char* dir = std::getenv("UPLIFTREC_COAT_DIR");
  if (!dir) GTEST_SKIP() << "UPLIFTREC_COAT_DIR not set";
  std::ifstream in(std::string(dir) + "/train.ascii");
  ASSERT_TRUE(in) << "missing train.ascii";
  const auto train = parse_rating_matrix(in, 4);
  std::set<UserId> users;
  std::set<ItemId> items;
  long pos = 0;
  for (const auto& r : train) {
    users.insert(r.user);
    items.insert(r.item);
    pos += r.label;
  }
  EXPECT_EQ(users.size(), 290u);
  EXPECT_LE(items.size(), 300u);
  EXPECT_NEAR(static_cast<double>(pos), 1900.0, 100.0);
  EXPECT_NEAR(static_cast<double>(train.size()) - pos, 5100.0, 100.0);
}
