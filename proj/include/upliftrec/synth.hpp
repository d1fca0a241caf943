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

// Synthetic worlds with known per-user dose-response curves and a logging
// policy that over-exposes each user's dominant category. Used as ground
// truth for estimator and planner checks.

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <ostream>
#include <random>
#include <vector>

#include "upliftrec/causal.hpp"
#include "upliftrec/common.hpp"
#include "upliftrec/data.hpp"

namespace upliftrec {

struct UserTruth {
  std::vector<double> peak;   // exposure ratio with the highest CTR
  std::vector<double> base;   // CTR at the peak
  std::vector<double> width;  // half-width of the curve's support
  int dominant = 0;           // category the logging policy favors
};

struct WorldConfig {
  int num_users = 1000;
  int C = 3;
  int items_per_category = 50;
  std::uint64_t seed = 0;
  double peak_lo = 0.1, peak_hi = 0.9;
  double base_lo = 0.05, base_hi = 0.6;
  double width_lo = 0.4, width_hi = 1.0;
};

struct SyntheticWorld {
  int C = 0;
  int items_per_category = 0;
  std::uint64_t seed = 0;
  std::vector<UserTruth> users;

  ItemId item(int category, int index) const {
    return static_cast<ItemId>(category) * items_per_category + index;
  }
  int category_of(ItemId item) const { return static_cast<int>(item / items_per_category); }
  std::vector<ItemId> catalog() const {
    std::vector<ItemId> items(static_cast<std::size_t>(C) * static_cast<std::size_t>(items_per_category));
    std::iota(items.begin(), items.end(), ItemId{0});
    return items;
  }
  CategoryMap categories() const {
    CategoryMap map;
    map.num_categories = C;
    for (ItemId i : catalog()) map.assignment[i] = category_of(i);
    return map;
  }
};

// Draws every user's curves independently. The dominant category is the
// user's highest-CTR one, so treatment and outcome share a cause.
inline SyntheticWorld make_world(const WorldConfig& cfg) {
  if (cfg.num_users < 1 || cfg.C < 1 || cfg.items_per_category < 1) {
    throw DomainError("make_world: users, C and items_per_category must be >= 1");
  }
  SyntheticWorld world;
  world.C = cfg.C;
  world.items_per_category = cfg.items_per_category;
  world.seed = cfg.seed;
  std::mt19937_64 rng(cfg.seed);
  std::uniform_real_distribution<double> peak(cfg.peak_lo, cfg.peak_hi);
  std::uniform_real_distribution<double> base(cfg.base_lo, cfg.base_hi);
  std::uniform_real_distribution<double> width(cfg.width_lo, cfg.width_hi);
  const auto nc = static_cast<std::size_t>(cfg.C);
  world.users.resize(static_cast<std::size_t>(cfg.num_users));
  for (auto& u : world.users) {
    u.peak.resize(nc);
    u.base.resize(nc);
    u.width.resize(nc);
    for (std::size_t c = 0; c < nc; ++c) {
      u.peak[c] = peak(rng);
      u.base[c] = base(rng);
      u.width[c] = width(rng);
    }
    u.dominant = static_cast<int>(std::max_element(u.base.begin(), u.base.end()) - u.base.begin());
  }
  return world;
}

// Unimodal CTR curve: base * max(0, 1 - ((t - peak) / width)^2), in [0,1].
inline double true_ctr(const SyntheticWorld& world, std::size_t user, int c, double t) {
  const auto& u = world.users.at(user);
  const auto cc = static_cast<std::size_t>(c);
  const double z = (t - u.peak.at(cc)) / u.width[cc];
  return std::clamp(u.base[cc] * std::max(0.0, 1.0 - z * z), 0.0, 1.0);
}

// Mean of true_ctr(k / K) over all users, per category and slot.
inline Grid<double> population_adrf(const SyntheticWorld& world, int K) {
  Grid<double> g(static_cast<std::size_t>(world.C), static_cast<std::size_t>(K) + 1, 0.0);
  for (std::size_t u = 0; u < world.users.size(); ++u) {
    for (int c = 0; c < world.C; ++c) {
      for (int k = 0; k <= K; ++k) {
        g(static_cast<std::size_t>(c), static_cast<std::size_t>(k)) +=
            true_ctr(world, u, c, static_cast<double>(k) / K);
      }
    }
  }
  for (std::size_t c = 0; c < g.rows(); ++c)
    for (std::size_t k = 0; k < g.cols(); ++k) g(c, k) /= static_cast<double>(world.users.size());
  return g;
}

// How the logger splits a window across categories. The confounded policy
// mixes a uniform draw over all compositions (weight 1 - strength) with a
// draw that puts each slot on the dominant category with probability
// kDominantShare, so every composition keeps non-zero probability.
struct LoggingPolicy {
  enum class Kind { kUniform, kConfounded };
  Kind kind = Kind::kUniform;
  double strength = 0.0;

  static constexpr double kDominantShare = 0.8;

  static LoggingPolicy uniform() { return {}; }
  static LoggingPolicy confounded(double strength) {
    return {Kind::kConfounded, strength};
  }
};

// Uniformly random composition of n into parts non-negative parts
// (stars and bars).
inline std::vector<int> random_composition(int n, int parts, std::mt19937_64& rng) {
  std::vector<int> cells(static_cast<std::size_t>(n + parts - 1));
  std::iota(cells.begin(), cells.end(), 0);
  // Choose parts - 1 bar positions uniformly among n + parts - 1 cells.
  std::vector<int> bars;
  bars.reserve(static_cast<std::size_t>(parts - 1));
  for (int b = 0; b < parts - 1; ++b) {
    std::uniform_int_distribution<std::size_t> pick(static_cast<std::size_t>(b), cells.size() - 1);
    std::swap(cells[static_cast<std::size_t>(b)], cells[pick(rng)]);
    bars.push_back(cells[static_cast<std::size_t>(b)]);
  }
  std::sort(bars.begin(), bars.end());
  std::vector<int> out(static_cast<std::size_t>(parts), 0);
  int prev = -1;
  for (int p = 0; p < parts - 1; ++p) {
    out[static_cast<std::size_t>(p)] = bars[static_cast<std::size_t>(p)] - prev - 1;
    prev = bars[static_cast<std::size_t>(p)];
  }
  out[static_cast<std::size_t>(parts - 1)] = n + parts - 1 - prev - 1;
  return out;
}

inline std::vector<int> draw_window_counts(const LoggingPolicy& policy, int dominant, int C,
                                           int window_len, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  const double coin = u01(rng);
  const double strength = policy.kind == LoggingPolicy::Kind::kUniform ? 0.0 : policy.strength;
  if (coin >= strength) return random_composition(window_len, C, rng);
  std::vector<int> counts(static_cast<std::size_t>(C), 0);
  for (int s = 0; s < window_len; ++s) {
    if (C == 1 || u01(rng) < LoggingPolicy::kDominantShare) {
      ++counts[static_cast<std::size_t>(dominant)];
    } else {
      std::uniform_int_distribution<int> other(0, C - 2);
      int c = other(rng);
      if (c >= dominant) ++c;
      ++counts[static_cast<std::size_t>(c)];
    }
  }
  return counts;
}

namespace detail {
inline double binomial_coefficient(int n, int k) {
  if (k < 0 || k > n) return 0.0;
  return std::exp(std::lgamma(n + 1.0) - std::lgamma(k + 1.0) - std::lgamma(n - k + 1.0));
}

inline double binomial_pmf(int n, int k, double p) {
  if (k < 0 || k > n) return 0.0;
  return binomial_coefficient(n, k) * std::pow(p, k) * std::pow(1.0 - p, n - k);
}
}  // namespace detail

// Exact probability that the policy gives `count` of window_len exposures to
// category c for a user whose dominant category is `dominant`.
inline double policy_count_probability(const LoggingPolicy& policy, int dominant, int C,
                                       int window_len, int c, int count) {
  if (count < 0 || count > window_len) return 0.0;
  const double uniform =
      C == 1 ? (count == window_len ? 1.0 : 0.0)
             : detail::binomial_coefficient(window_len - count + C - 2, C - 2) /
                   detail::binomial_coefficient(window_len + C - 1, C - 1);
  const double strength = policy.kind == LoggingPolicy::Kind::kUniform ? 0.0 : policy.strength;
  if (strength == 0.0) return uniform;
  double skewed = 0.0;
  if (C == 1) {
    skewed = count == window_len ? 1.0 : 0.0;
  } else {
    const double p = c == dominant ? LoggingPolicy::kDominantShare
                                   : (1.0 - LoggingPolicy::kDominantShare) / (C - 1);
    skewed = detail::binomial_pmf(window_len, count, p);
  }
  return (1.0 - strength) * uniform + strength * skewed;
}

namespace detail {
// Appends one window with the given category counts: distinct items per
// category, shuffled order, Bernoulli clicks at the realized ratio.
inline void emit_window(const SyntheticWorld& world, std::size_t user, const std::vector<int>& counts,
                        int window_len, std::int64_t& position, Records& out,
                        std::mt19937_64& rng) {
  std::vector<std::pair<ItemId, int>> slots;
  for (int c = 0; c < world.C; ++c) {
    const int n = counts[static_cast<std::size_t>(c)];
    if (n > world.items_per_category) {
      throw DomainError("simulate: window needs more items than a category holds");
    }
    std::vector<int> pool(static_cast<std::size_t>(world.items_per_category));
    std::iota(pool.begin(), pool.end(), 0);
    for (int k = 0; k < n; ++k) {
      std::uniform_int_distribution<std::size_t> pick(static_cast<std::size_t>(k), pool.size() - 1);
      std::swap(pool[static_cast<std::size_t>(k)], pool[pick(rng)]);
      slots.emplace_back(world.item(c, pool[static_cast<std::size_t>(k)]), c);
    }
  }
  std::shuffle(slots.begin(), slots.end(), rng);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  for (const auto& [item, c] : slots) {
    const double ratio = static_cast<double>(counts[static_cast<std::size_t>(c)]) / window_len;
    const int label = u01(rng) < true_ctr(world, user, c, ratio) ? 1 : 0;
    out.push_back({static_cast<UserId>(user), item, label, position++});
  }
}
}  // namespace detail

// Logged trails: windows_per_user consecutive windows of window_len
// exposures per user. Users are numbered by their index in the world.
inline std::vector<Trail> simulate_logs(const SyntheticWorld& world, const LoggingPolicy& policy,
                                        int windows_per_user, int window_len, std::uint64_t seed) {
  if (policy.kind == LoggingPolicy::Kind::kConfounded &&
      !(policy.strength >= 0.0 && policy.strength < 1.0)) {
    throw DomainError("simulate_logs: confounding strength must lie in [0,1)");
  }
  if (windows_per_user < 1 || window_len < 1) {
    throw DomainError("simulate_logs: windows_per_user and window_len must be >= 1");
  }
  std::mt19937_64 rng(seed);
  std::vector<Trail> trails(world.users.size());
  for (std::size_t u = 0; u < world.users.size(); ++u) {
    trails[u].user = static_cast<UserId>(u);
    std::int64_t position = 0;
    for (int w = 0; w < windows_per_user; ++w) {
      const auto counts = draw_window_counts(policy, world.users[u].dominant, world.C, window_len, rng);
      detail::emit_window(world, u, counts, window_len, position, trails[u].records, rng);
    }
  }
  return trails;
}

// Randomized exposure (the unbiased part): items_per_user distinct items
// drawn uniformly from the whole catalog, clicked at the realized ratios.
inline Records simulate_random_exposure(const SyntheticWorld& world, int items_per_user,
                                        std::uint64_t seed) {
  const auto catalog = world.catalog();
  if (items_per_user < 1 || static_cast<std::size_t>(items_per_user) > catalog.size()) {
    throw DomainError("simulate_random_exposure: bad items_per_user");
  }
  std::mt19937_64 rng(seed);
  Records out;
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  for (std::size_t u = 0; u < world.users.size(); ++u) {
    std::vector<ItemId> pool = catalog;
    for (int k = 0; k < items_per_user; ++k) {
      std::uniform_int_distribution<std::size_t> pick(static_cast<std::size_t>(k), pool.size() - 1);
      std::swap(pool[static_cast<std::size_t>(k)], pool[pick(rng)]);
    }
    std::vector<int> counts(static_cast<std::size_t>(world.C), 0);
    for (int k = 0; k < items_per_user; ++k) ++counts[static_cast<std::size_t>(world.category_of(pool[static_cast<std::size_t>(k)]))];
    for (int k = 0; k < items_per_user; ++k) {
      const ItemId item = pool[static_cast<std::size_t>(k)];
      const int c = world.category_of(item);
      const double ratio = static_cast<double>(counts[static_cast<std::size_t>(c)]) / items_per_user;
      out.push_back({static_cast<UserId>(u), item, u01(rng) < true_ctr(world, u, c, ratio) ? 1 : 0, k});
    }
  }
  return out;
}

struct OraclePlan {
  DiscreteTreatment slots;
  double value = 0.0;  // expected clicks in an N-item list
};

// Exhaustive search over compositions of K into C parts maximizing
// sum_c (k_c / K) * N * true_ctr(k_c / K). First optimum in lexicographic
// order wins ties.
inline OraclePlan oracle_best_treatment(const SyntheticWorld& world, std::size_t user, int K, int N) {
  if (world.C > 6 || K > 10) throw DomainError("oracle_best_treatment: instance too large");
  if (K < 1) throw DomainError("oracle_best_treatment: K must be >= 1");
  OraclePlan best{{std::vector<int>(static_cast<std::size_t>(world.C), 0), K}, -1.0};
  std::vector<int> slots(static_cast<std::size_t>(world.C), 0);
  std::function<void(int, int)> rec = [&](int c, int left) {
    if (c == world.C - 1) {
      slots[static_cast<std::size_t>(c)] = left;
      double v = 0.0;
      for (int i = 0; i < world.C; ++i) {
        const double t = static_cast<double>(slots[static_cast<std::size_t>(i)]) / K;
        v += t * N * true_ctr(world, user, i, t);
      }
      if (v > best.value) best = {{slots, K}, v};
      return;
    }
    for (int j = 0; j <= left; ++j) {
      slots[static_cast<std::size_t>(c)] = j;
      rec(c + 1, left - j);
    }
  };
  rec(0, K);
  return best;
}

// `user <TAB> category <TAB> peak <TAB> base <TAB> width <TAB> dominant`
inline void write_truth(std::ostream& out, const SyntheticWorld& world) {
  out << "#user\tcategory\tpeak\tbase\twidth\tdominant\n";
  for (std::size_t u = 0; u < world.users.size(); ++u) {
    const auto& t = world.users[u];
    for (int c = 0; c < world.C; ++c) {
      const auto cc = static_cast<std::size_t>(c);
      out << u << '\t' << c << '\t' << format_double(t.peak[cc]) << '\t' << format_double(t.base[cc])
          << '\t' << format_double(t.width[cc]) << '\t' << t.dominant << '\n';
    }
  }
}

}  // namespace upliftrec
