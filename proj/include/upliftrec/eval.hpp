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

// Offline ranking metrics against unbiased test positives: Recall@K,
// NDCG@K, and recall restricted to unexpected-category (RUE@K) or unpopular
// (RUP@K) positives.

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "upliftrec/common.hpp"
#include "upliftrec/data.hpp"

namespace upliftrec {

inline constexpr std::size_t kExpectedCategoryCount = 3;

namespace detail {
inline void require_length(std::span<const ItemId> list, std::size_t k) {
  if (list.size() < k) {
    throw DomainError("metric: list of length " + std::to_string(list.size()) +
                      " is shorter than K=" + std::to_string(k));
  }
}

inline std::size_t hits_in_top(std::span<const ItemId> list, const std::set<ItemId>& relevant,
                               std::size_t k) {
  std::size_t hits = 0;
  for (std::size_t r = 0; r < k; ++r) hits += relevant.count(list[r]);
  return hits;
}

inline std::optional<double> recall_over(std::span<const ItemId> list,
                                         const std::set<ItemId>& relevant, std::size_t k) {
  require_length(list, k);
  if (relevant.empty()) return std::nullopt;
  return static_cast<double>(hits_in_top(list, relevant, k)) /
         static_cast<double>(relevant.size());
}
}  // namespace detail

// nullopt means the user has no positives and is excluded from averaging.
inline std::optional<double> recall_at_k(std::span<const ItemId> list,
                                         const std::set<ItemId>& positives, std::size_t k) {
  return detail::recall_over(list, positives, k);
}

inline std::optional<double> ndcg_at_k(std::span<const ItemId> list,
                                       const std::set<ItemId>& positives, std::size_t k) {
  detail::require_length(list, k);
  if (positives.empty()) return std::nullopt;
  double dcg = 0.0, idcg = 0.0;
  for (std::size_t r = 0; r < k; ++r) {
    if (positives.count(list[r])) dcg += 1.0 / std::log2(static_cast<double>(r) + 2.0);
  }
  const std::size_t ideal = std::min(k, positives.size());
  for (std::size_t r = 0; r < ideal; ++r) idcg += 1.0 / std::log2(static_cast<double>(r) + 2.0);
  return dcg / idcg;
}

// The user's three most-clicked categories in training history, ties broken
// by lower category index.
inline std::set<int> top_history_categories(std::span<const InteractionRecord> history,
                                            const CategoryMap& categories) {
  std::vector<long> clicks(static_cast<std::size_t>(categories.num_categories), 0);
  for (const auto& r : history) {
    if (r.label == 1) ++clicks[static_cast<std::size_t>(categories.at(r.item))];
  }
  std::vector<int> order(clicks.size());
  for (std::size_t c = 0; c < order.size(); ++c) order[c] = static_cast<int>(c);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return clicks[static_cast<std::size_t>(a)] > clicks[static_cast<std::size_t>(b)];
  });
  order.resize(std::min(order.size(), kExpectedCategoryCount));
  return {order.begin(), order.end()};
}

// Recall over positives whose category is outside the user's top-3 history
// categories. Undefined (nullopt) when there are no such positives, which
// always happens with three or fewer categories.
inline std::optional<double> rue_at_k(std::span<const ItemId> list,
                                      const std::set<ItemId>& positives,
                                      std::span<const InteractionRecord> history,
                                      const CategoryMap& categories, std::size_t k) {
  detail::require_length(list, k);
  if (categories.num_categories <= static_cast<int>(kExpectedCategoryCount)) return std::nullopt;
  const auto expected = top_history_categories(history, categories);
  std::set<ItemId> unexpected;
  for (ItemId i : positives)
    if (!expected.count(categories.at(i))) unexpected.insert(i);
  return detail::recall_over(list, unexpected, k);
}

inline std::optional<double> rup_at_k(std::span<const ItemId> list,
                                      const std::set<ItemId>& positives,
                                      const PopularityTable& popularity, std::size_t k) {
  std::set<ItemId> unpopular;
  for (ItemId i : positives)
    if (popularity.is_unpopular(i)) unpopular.insert(i);
  return detail::recall_over(list, unpopular, k);
}

inline const std::vector<std::string>& metric_names() {
  static const std::vector<std::string> names{"recall", "ndcg", "rue", "rup"};
  return names;
}

struct MetricReport {
  std::vector<int> cutoffs;
  // metric -> cutoff -> macro average over included users
  std::map<std::string, std::map<int, double>> value;
  // metric -> cutoff -> number of users averaged over
  std::map<std::string, std::map<int, std::size_t>> included;
  // user -> metric -> cutoff -> value (only included users)
  std::map<UserId, std::map<std::string, std::map<int, double>>> per_user;
  std::size_t users_evaluated = 0;
  std::size_t users_skipped = 0;  // recommendations but no test data

  double get(const std::string& metric, int cutoff) const {
    auto m = value.find(metric);
    if (m == value.end()) return 0.0;
    auto c = m->second.find(cutoff);
    return c == m->second.end() ? 0.0 : c->second;
  }

  friend bool operator==(const MetricReport&, const MetricReport&) = default;
};

// Macro-averages every metric at every cutoff. `label_categories` may be
// null when the dataset has no category labels (RUE is then omitted).
inline MetricReport evaluate_run(const std::map<UserId, std::vector<ItemId>>& recommendations,
                                 std::span<const InteractionRecord> test,
                                 std::span<const InteractionRecord> train,
                                 const CategoryMap* label_categories,
                                 const PopularityTable& popularity,
                                 std::span<const int> cutoffs) {
  MetricReport report;
  report.cutoffs.assign(cutoffs.begin(), cutoffs.end());
  std::map<UserId, std::set<ItemId>> positives;
  std::set<UserId> has_test;
  for (const auto& r : test) {
    has_test.insert(r.user);
    if (r.label == 1) positives[r.user].insert(r.item);
  }
  std::map<UserId, Records> history;
  for (const auto& r : train) history[r.user].push_back(r);

  if (label_categories && label_categories->num_categories <= static_cast<int>(kExpectedCategoryCount)) {
    log_warn("evaluate_run: " + std::to_string(label_categories->num_categories) +
             " categories leave no unexpected category; RUE is undefined");
  }

  std::map<std::string, std::map<int, double>> sums;
  static const std::set<ItemId> kNone;
  static const Records kNoHistory;
  for (const auto& [user, list] : recommendations) {
    if (!has_test.count(user)) {
      ++report.users_skipped;
      continue;
    }
    ++report.users_evaluated;
    auto pit = positives.find(user);
    const auto& pos = pit == positives.end() ? kNone : pit->second;
    auto hit = history.find(user);
    const auto& hist = hit == history.end() ? kNoHistory : hit->second;
    for (int cutoff : cutoffs) {
      const auto k = static_cast<std::size_t>(cutoff);
      auto record = [&](const std::string& metric, std::optional<double> v) {
        if (!v) return;
        sums[metric][cutoff] += *v;
        ++report.included[metric][cutoff];
        report.per_user[user][metric][cutoff] = *v;
      };
      record("recall", recall_at_k(list, pos, k));
      record("ndcg", ndcg_at_k(list, pos, k));
      if (label_categories) record("rue", rue_at_k(list, pos, hist, *label_categories, k));
      record("rup", rup_at_k(list, pos, popularity, k));
    }
  }
  if (report.users_skipped > 0) {
    log_info("evaluate_run: skipped " + std::to_string(report.users_skipped) +
             " users without test data");
  }
  for (const auto& [metric, by_cut] : sums) {
    for (const auto& [cutoff, total] : by_cut) {
      report.value[metric][cutoff] = total / static_cast<double>(report.included[metric][cutoff]);
    }
  }
  return report;
}

// Aligned table: one row per metric, one column per cutoff.
inline void write_report_table(std::ostream& out, const MetricReport& report) {
  out << std::left << std::setw(8) << "metric";
  for (int c : report.cutoffs) out << std::right << std::setw(12) << ("@" + std::to_string(c));
  out << std::right << std::setw(10) << "users" << '\n';
  for (const auto& metric : metric_names()) {
    if (!report.value.count(metric)) continue;
    out << std::left << std::setw(8) << metric;
    std::size_t users = 0;
    for (int c : report.cutoffs) {
      std::ostringstream cell;
      cell << std::fixed << std::setprecision(4) << report.get(metric, c);
      out << std::right << std::setw(12) << cell.str();
      auto inc = report.included.at(metric).find(c);
      if (inc != report.included.at(metric).end()) users = inc->second;
    }
    out << std::right << std::setw(10) << users << '\n';
  }
}

// `metric.cutoff = value` lines plus included-user counts.
inline void write_report_kv(std::ostream& out, const MetricReport& report) {
  for (const auto& metric : metric_names()) {
    if (!report.value.count(metric)) continue;
    for (int c : report.cutoffs) {
      out << metric << '.' << c << " = " << format_double(report.get(metric, c)) << '\n';
    }
  }
  for (const auto& metric : metric_names()) {
    if (!report.included.count(metric)) continue;
    for (int c : report.cutoffs) {
      auto it = report.included.at(metric).find(c);
      out << metric << '.' << c << ".users = "
          << (it == report.included.at(metric).end() ? 0 : it->second) << '\n';
    }
  }
  out << "users.evaluated = " << report.users_evaluated << '\n';
  out << "users.skipped = " << report.users_skipped << '\n';
}

}  // namespace upliftrec
