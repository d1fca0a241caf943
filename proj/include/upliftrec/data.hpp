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
#pragma once

// Logged-feedback ingestion: interaction records, unbiased splits,
// popularity flags, category labels, and dense id re-indexing.

#include <algorithm>
#include <cctype>
#include <istream>
#include <map>
#include <numeric>
#include <ostream>
#include <random>
#include <set>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "upliftrec/common.hpp"

namespace upliftrec {

// One logged exposure. label is 1 for a click / positive rating and 0 for an
// exposure the user did not engage with.
struct InteractionRecord {
  UserId user = 0;
  ItemId item = 0;
  int label = 0;
  std::int64_t position = 0;

  friend bool operator==(const InteractionRecord&, const InteractionRecord&) = default;
};

using Records = std::vector<InteractionRecord>;

struct DatasetSplit {
  Records train;  // biased log
  Records valid;  // unbiased
  Records test;   // unbiased
};

// Parses `user <TAB> item <TAB> label [<TAB> position]` lines. Blank lines and
// lines starting with '#' are ignored. Without a position column each record
// gets its index among the preceding records of the same user.
inline Records parse_interactions(std::istream& in, bool has_position) {
  Records out;
  std::unordered_map<UserId, std::int64_t> next_position;
  std::map<std::pair<UserId, std::int64_t>, std::size_t> seen_positions;
  std::string line;
  std::size_t lineno = 0;
  const std::size_t expected = has_position ? 4 : 3;
  while (std::getline(in, line)) {
    ++lineno;
    std::string_view view = trim(line);
    if (view.empty() || view.front() == '#') continue;
    auto fields = split_fields(view, '\t');
    if (fields.size() != expected) {
      throw ParseError(lineno, "expected " + std::to_string(expected) +
                                   " tab-separated fields, got " +
                                   std::to_string(fields.size()));
    }
    InteractionRecord rec;
    if (!parse_int(fields[0], rec.user) || rec.user < 0) {
      throw ParseError(lineno, "bad user id '" + std::string(fields[0]) + "'");
    }
    if (!parse_int(fields[1], rec.item) || rec.item < 0) {
      throw ParseError(lineno, "bad item id '" + std::string(fields[1]) + "'");
    }
    if (!parse_int(fields[2], rec.label)) {
      throw ParseError(lineno, "bad label '" + std::string(fields[2]) + "'");
    }
    if (rec.label != 0 && rec.label != 1) {
      throw DomainError("line " + std::to_string(lineno) + ": label " +
                        std::to_string(rec.label) + " is not in {0,1}");
    }
    if (has_position) {
      if (!parse_int(fields[3], rec.position) || rec.position < 0) {
        throw ParseError(lineno, "bad position '" + std::string(fields[3]) + "'");
      }
    } else {
      rec.position = next_position[rec.user]++;
    }
    auto [it, fresh] = seen_positions.emplace(std::pair{rec.user, rec.position}, lineno);
    if (!fresh) {
      throw DomainError("line " + std::to_string(lineno) + ": position " +
                        std::to_string(rec.position) + " repeats line " +
                        std::to_string(it->second) + " for user " +
                        std::to_string(rec.user));
    }
    out.push_back(rec);
  }
  return out;
}

inline void write_interactions(std::ostream& out, std::span<const InteractionRecord> records,
                               bool with_position = true) {
  for (const auto& r : records) {
    out << r.user << '\t' << r.item << '\t' << r.label;
    if (with_position) out << '\t' << r.position;
    out << '\n';
  }
}

// Reads a dense rating matrix (one row per user, whitespace-separated, 0 =
// unrated), the layout the Coat and similar MNAR benchmarks ship in.
// Ratings >= positive_threshold become label 1, other non-zero ratings 0.
inline Records parse_rating_matrix(std::istream& in, int positive_threshold = 4) {
  Records out;
  std::string line;
  std::size_t lineno = 0;
  UserId user = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    std::int64_t position = 0;
    ItemId item = 0;
    std::size_t start = 0;
    while (start < line.size()) {
      while (start < line.size() && std::isspace(static_cast<unsigned char>(line[start]))) ++start;
      if (start >= line.size()) break;
      std::size_t end = start;
      while (end < line.size() && !std::isspace(static_cast<unsigned char>(line[end]))) ++end;
      int rating = 0;
      if (!parse_int(std::string_view(line).substr(start, end - start), rating) || rating < 0) {
        throw ParseError(lineno, "bad rating '" + line.substr(start, end - start) + "'");
      }
      if (rating > 0) {
        out.push_back({user, item, rating >= positive_threshold ? 1 : 0, position++});
      }
      ++item;
      start = end;
    }
    ++user;
  }
  return out;
}

// User-stratified random split of the unbiased records: each user's records
// are shuffled and the first round(ratio * n) go to validation. Both parts
// keep file order.
inline std::pair<Records, Records> split_unbiased(std::span<const InteractionRecord> records,
                                                  double ratio, std::uint64_t seed) {
  if (records.empty()) throw DomainError("split_unbiased: no records");
  if (!(ratio > 0.0 && ratio < 1.0)) {
    throw DomainError("split_unbiased: ratio must lie in (0,1)");
  }
  std::map<UserId, std::vector<std::size_t>> by_user;
  for (std::size_t i = 0; i < records.size(); ++i) by_user[records[i].user].push_back(i);

  std::mt19937_64 rng(seed);
  std::vector<char> to_valid(records.size(), 0);
  for (auto& [user, idx] : by_user) {
    std::shuffle(idx.begin(), idx.end(), rng);
    const auto take = static_cast<std::size_t>(std::floor(ratio * static_cast<double>(idx.size()) + 0.5));
    for (std::size_t k = 0; k < take && k < idx.size(); ++k) to_valid[idx[k]] = 1;
  }
  Records valid, test;
  for (std::size_t i = 0; i < records.size(); ++i) {
    (to_valid[i] ? valid : test).push_back(records[i]);
  }
  if (valid.empty()) throw DomainError("split_unbiased: validation part is empty");
  if (test.empty()) throw DomainError("split_unbiased: test part is empty");
  return {std::move(valid), std::move(test)};
}

// Sorted, de-duplicated item ids over any number of record sets.
inline std::vector<ItemId> collect_items(std::initializer_list<std::span<const InteractionRecord>> sets) {
  std::set<ItemId> items;
  for (auto set : sets)
    for (const auto& r : set) items.insert(r.item);
  return {items.begin(), items.end()};
}

struct PopularityTable {
  std::map<ItemId, long> count;
  std::map<ItemId, bool> unpopular;
  long threshold = 0;  // largest count still flagged unpopular

  long count_of(ItemId item) const {
    auto it = count.find(item);
    return it == count.end() ? 0 : it->second;
  }
  // Items outside the catalog never showed up in training: count 0.
  bool is_unpopular(ItemId item) const {
    auto it = unpopular.find(item);
    return it == unpopular.end() ? true : it->second;
  }
};

// Counts every training exposure (positive or negative). An item is unpopular
// when its count is at most the count of the ceil(0.9 * |catalog|)-th least
// popular item, so ties at the threshold are unpopular.
inline PopularityTable build_popularity(std::span<const InteractionRecord> train,
                                        std::span<const ItemId> catalog) {
  PopularityTable table;
  for (ItemId item : catalog) table.count[item] = 0;
  for (const auto& r : train) ++table.count[r.item];
  if (table.count.empty()) return table;

  std::vector<long> sorted;
  sorted.reserve(table.count.size());
  for (const auto& [item, c] : table.count) sorted.push_back(c);
  std::sort(sorted.begin(), sorted.end());
  const std::size_t n = sorted.size();
  const std::size_t rank = std::max<std::size_t>(1, (9 * n + 9) / 10);
  table.threshold = sorted[rank - 1];
  for (const auto& [item, c] : table.count) table.unpopular[item] = c <= table.threshold;
  return table;
}

// Item -> category index in [0, num_categories).
struct CategoryMap {
  std::map<ItemId, int> assignment;
  int num_categories = 0;
  // Original label for each dense index, when loaded from a label file.
  std::vector<std::string> labels;

  bool contains(ItemId item) const { return assignment.count(item) != 0; }

  int at(ItemId item) const {
    auto it = assignment.find(item);
    if (it == assignment.end()) {
      throw DomainError("item " + std::to_string(item) + " has no category");
    }
    return it->second;
  }

  void require_total(std::span<const ItemId> catalog) const {
    for (ItemId item : catalog) (void)at(item);
  }

  friend bool operator==(const CategoryMap& a, const CategoryMap& b) {
    return a.assignment == b.assignment && a.num_categories == b.num_categories;
  }
};

// Reads `item <TAB> category` lines; category tokens are remapped to dense
// indices in first-seen order.
inline CategoryMap load_categories(std::istream& in) {
  CategoryMap map;
  std::map<std::string, int, std::less<>> dense;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::string_view view = trim(line);
    if (view.empty() || view.front() == '#') continue;
    auto fields = split_fields(view, '\t');
    if (fields.size() != 2) throw ParseError(lineno, "expected `item<TAB>category`");
    ItemId item = 0;
    if (!parse_int(fields[0], item) || item < 0) {
      throw ParseError(lineno, "bad item id '" + std::string(fields[0]) + "'");
    }
    std::string label(trim(fields[1]));
    if (label.empty()) throw ParseError(lineno, "empty category");
    auto [it, fresh] = dense.emplace(label, static_cast<int>(dense.size()));
    if (fresh) map.labels.push_back(label);
    auto [slot, inserted] = map.assignment.emplace(item, it->second);
    if (!inserted && slot->second != it->second) {
      throw DomainError("line " + std::to_string(lineno) + ": item " +
                        std::to_string(item) + " assigned to conflicting categories");
    }
  }
  map.num_categories = static_cast<int>(dense.size());
  return map;
}

inline void write_categories(std::ostream& out, const CategoryMap& map) {
  for (const auto& [item, c] : map.assignment) out << item << '\t' << c << '\n';
}

// One user's records ordered by position.
struct Trail {
  UserId user = 0;
  Records records;
};

inline std::vector<Trail> group_trails(std::span<const InteractionRecord> records) {
  std::map<UserId, Records> by_user;
  for (const auto& r : records) by_user[r.user].push_back(r);
  std::vector<Trail> trails;
  trails.reserve(by_user.size());
  for (auto& [user, recs] : by_user) {
    std::stable_sort(recs.begin(), recs.end(),
                     [](const auto& a, const auto& b) { return a.position < b.position; });
    trails.push_back({user, std::move(recs)});
  }
  return trails;
}

// Original id <-> dense id, assigned in first-interned order.
class IdMap {
 public:
  std::int64_t intern(std::int64_t original) {
    auto [it, fresh] = dense_.emplace(original, static_cast<std::int64_t>(original_.size()));
    if (fresh) original_.push_back(original);
    return it->second;
  }
  std::int64_t to_dense(std::int64_t original) const {
    auto it = dense_.find(original);
    if (it == dense_.end()) throw DomainError("unknown id " + std::to_string(original));
    return it->second;
  }
  std::int64_t to_original(std::int64_t dense) const {
    if (dense < 0 || static_cast<std::size_t>(dense) >= original_.size()) {
      throw DomainError("unknown dense id " + std::to_string(dense));
    }
    return original_[static_cast<std::size_t>(dense)];
  }
  std::size_t size() const { return original_.size(); }
  const std::vector<std::int64_t>& originals() const { return original_; }

 private:
  std::vector<std::int64_t> original_;
  std::unordered_map<std::int64_t, std::int64_t> dense_;
};

struct DenseIds {
  IdMap users;
  IdMap items;
};

// Re-indexes users and items of every split (train first, then valid, test,
// then extra catalog items) to dense ids in place.
inline DenseIds reindex(DatasetSplit& split, std::span<const ItemId> extra_items = {}) {
  DenseIds ids;
  for (Records* part : {&split.train, &split.valid, &split.test}) {
    for (auto& r : *part) {
      r.user = ids.users.intern(r.user);
      r.item = ids.items.intern(r.item);
    }
  }
  for (ItemId item : extra_items) ids.items.intern(item);
  return ids;
}

inline void write_id_map(std::ostream& out, const DenseIds& ids) {
  out << "#kind\toriginal\tdense\n";
  for (std::size_t i = 0; i < ids.users.size(); ++i) {
    out << "user\t" << ids.users.originals()[i] << '\t' << i << '\n';
  }
  for (std::size_t i = 0; i < ids.items.size(); ++i) {
    out << "item\t" << ids.items.originals()[i] << '\t' << i << '\n';
  }
}

}  // namespace upliftrec
