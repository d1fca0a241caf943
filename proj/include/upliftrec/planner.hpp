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

// Treatment planning: knapsack DP over the dose-response grid, conversion of
// a slot allocation into a top-N list, and the marginal-effect score nudge.

#include <algorithm>
#include <cstdlib>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "upliftrec/apportion.hpp"
#include "upliftrec/backend.hpp"
#include "upliftrec/causal.hpp"

namespace upliftrec {

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();

class InfeasibleError : public Error {
 public:
  InfeasibleError(std::size_t category, const std::string& what)
      : Error(what), category_(category) {}
  std::size_t category() const noexcept { return category_; }

 private:
  std::size_t category_;
};

enum class DeviationMode {
  kPerCategory,  // |j_c - t0_c| <= epsilon for every c
  kAggregate,    // sum_c |j_c - t0_c| <= epsilon
};

// f(c, k): best total of j * A(c', j) over the first c categories using
// exactly k slots; choice(c, k) is the j taken for category c - 1.
struct DpTable {
  Grid<double> f;
  Grid<int> choice;
};

struct TreatmentPlan {
  DiscreteTreatment slots;
  double value = 0.0;  // expected clicks per K slots
  DpTable table;       // per-category mode only
};

namespace detail {

// Candidate slot counts for one category, most preferred first: closest to
// the reference count, then smaller.
inline std::vector<int> preference_order(int reference, int K) {
  std::vector<int> js(static_cast<std::size_t>(K) + 1);
  for (int j = 0; j <= K; ++j) js[static_cast<std::size_t>(j)] = j;
  std::stable_sort(js.begin(), js.end(), [&](int a, int b) {
    return std::abs(a - reference) < std::abs(b - reference);
  });
  return js;
}

inline void check_plan_inputs(const AdrfMatrix& A, const DiscreteTreatment& t0, int epsilon,
                              int K) {
  if (K < 0) throw DomainError("best_treatment: K must be >= 0");
  if (epsilon < 0) throw DomainError("best_treatment: epsilon must be >= 0");
  if (A.categories() != t0.size() || A.K() != K) {
    throw DomainError("best_treatment: ADRF shape does not match C x (K+1)");
  }
  for (int s : t0.slots) {
    if (s < 0 || s > K) throw DomainError("best_treatment: reference slot outside [0,K]");
  }
}

inline std::vector<int> trace(const Grid<int>& choice, std::size_t C, int K) {
  std::vector<int> slots(C, 0);
  int k = K;
  for (std::size_t c = C; c >= 1; --c) {
    const int j = choice(c, static_cast<std::size_t>(k));
    slots[c - 1] = j;
    k -= j;
  }
  return slots;
}

inline TreatmentPlan best_treatment_per_category(const AdrfMatrix& A, const DiscreteTreatment& t0,
                                                 int epsilon, int K) {
  const std::size_t C = t0.size();
  const auto nk = static_cast<std::size_t>(K) + 1;
  DpTable dp{Grid<double>(C + 1, nk, kNegInf), Grid<int>(C + 1, nk, -1)};
  dp.f(0, 0) = 0.0;
  for (std::size_t c = 1; c <= C; ++c) {
    const int ref = t0.slots[c - 1];
    std::vector<int> allowed;
    for (int j : preference_order(ref, K))
      if (std::abs(j - ref) <= epsilon) allowed.push_back(j);
    for (int k = 0; k <= K; ++k) {
      double best = kNegInf;
      int arg = -1;
      for (int j : allowed) {
        if (j > k) continue;
        const double prev = dp.f(c - 1, static_cast<std::size_t>(k - j));
        if (prev == kNegInf) continue;
        const double v = prev + j * A(c - 1, static_cast<std::size_t>(j));
        if (v > best) {
          best = v;
          arg = j;
        }
      }
      dp.f(c, static_cast<std::size_t>(k)) = best;
      dp.choice(c, static_cast<std::size_t>(k)) = arg;
    }
  }
  if (dp.f(C, static_cast<std::size_t>(K)) == kNegInf) {
    // Name the first category after which no completion to K slots exists.
    for (std::size_t c = 1; c <= C; ++c) {
      int lo = 0, hi = 0;
      for (std::size_t r = c; r < C; ++r) {
        lo += std::max(0, t0.slots[r] - epsilon);
        hi += std::min(K, t0.slots[r] + epsilon);
      }
      bool completes = false;
      for (int k = 0; k <= K && !completes; ++k) {
        completes = dp.f(c, static_cast<std::size_t>(k)) != kNegInf && K - k >= lo && K - k <= hi;
      }
      if (!completes) {
        throw InfeasibleError(c - 1, "best_treatment: no allocation of " + std::to_string(K) +
                                         " slots within epsilon=" + std::to_string(epsilon) +
                                         "; binding at category " + std::to_string(c - 1));
      }
    }
    throw InfeasibleError(C - 1, "best_treatment: infeasible");
  }
  TreatmentPlan plan;
  plan.value = dp.f(C, static_cast<std::size_t>(K));
  plan.slots = {trace(dp.choice, C, K), K};
  plan.table = std::move(dp);
  return plan;
}

// Same recursion with the used deviation budget as an extra state axis.
inline TreatmentPlan best_treatment_aggregate(const AdrfMatrix& A, const DiscreteTreatment& t0,
                                              int epsilon, int K) {
  const std::size_t C = t0.size();
  const auto nk = static_cast<std::size_t>(K) + 1, ne = static_cast<std::size_t>(epsilon) + 1;
  auto at = [&](std::size_t k, std::size_t e) { return k * ne + e; };
  std::vector<std::vector<double>> f(C + 1, std::vector<double>(nk * ne, kNegInf));
  std::vector<std::vector<int>> choice(C + 1, std::vector<int>(nk * ne, -1));
  f[0][at(0, 0)] = 0.0;
  for (std::size_t c = 1; c <= C; ++c) {
    const int ref = t0.slots[c - 1];
    const auto order = preference_order(ref, K);
    for (int k = 0; k <= K; ++k) {
      for (int e = 0; e <= epsilon; ++e) {
        double best = kNegInf;
        int arg = -1;
        for (int j : order) {
          const int dev = std::abs(j - ref);
          if (j > k || dev > e) continue;
          const double prev = f[c - 1][at(static_cast<std::size_t>(k - j), static_cast<std::size_t>(e - dev))];
          if (prev == kNegInf) continue;
          const double v = prev + j * A(c - 1, static_cast<std::size_t>(j));
          if (v > best) {
            best = v;
            arg = j;
          }
        }
        f[c][at(static_cast<std::size_t>(k), static_cast<std::size_t>(e))] = best;
        choice[c][at(static_cast<std::size_t>(k), static_cast<std::size_t>(e))] = arg;
      }
    }
  }
  // Prefer the smallest deviation among equal optima.
  double best = kNegInf;
  int best_e = -1;
  for (int e = 0; e <= epsilon; ++e) {
    const double v = f[C][at(static_cast<std::size_t>(K), static_cast<std::size_t>(e))];
    if (v > best) {
      best = v;
      best_e = e;
    }
  }
  if (best_e < 0) {
    throw InfeasibleError(0, "best_treatment: no allocation of " + std::to_string(K) +
                                 " slots within aggregate epsilon=" + std::to_string(epsilon));
  }
  std::vector<int> slots(C, 0);
  int k = K, e = best_e;
  for (std::size_t c = C; c >= 1; --c) {
    const int j = choice[c][at(static_cast<std::size_t>(k), static_cast<std::size_t>(e))];
    slots[c - 1] = j;
    k -= j;
    e -= std::abs(j - t0.slots[c - 1]);
  }
  TreatmentPlan plan;
  plan.value = best;
  plan.slots = {std::move(slots), K};
  return plan;
}

}  // namespace detail

// Allocation of K slots over categories maximizing sum_c j_c * A(c, j_c),
// with each j_c kept within epsilon of the reference t0_c (or, in aggregate
// mode, the total L1 deviation within epsilon). Among equal optima each
// category prefers the count closest to its reference, then the smaller one.
// Unfilled ADRF cells take part at their null value.
inline TreatmentPlan best_treatment(const AdrfMatrix& A, const DiscreteTreatment& t0, int epsilon,
                                    int K, DeviationMode mode = DeviationMode::kPerCategory) {
  detail::check_plan_inputs(A, t0, epsilon, K);
  return mode == DeviationMode::kPerCategory ? detail::best_treatment_per_category(A, t0, epsilon, K)
                                             : detail::best_treatment_aggregate(A, t0, epsilon, K);
}

// Items per category for an N-item list: largest-remainder apportionment of
// slots_c * N / K.
inline std::vector<int> category_budgets(const DiscreteTreatment& slots, int N, int K) {
  if (K < 1 || N < 0) throw DomainError("category_budgets: need K >= 1 and N >= 0");
  if (slots.total() != K) throw DomainError("category_budgets: slots must sum to K");
  std::vector<double> quotas(slots.size());
  for (std::size_t c = 0; c < quotas.size(); ++c) {
    quotas[c] = static_cast<double>(slots.slots[c]) * N / K;
  }
  return apportion_largest_remainder(quotas, N);
}

// Fills each category's budget with its best-scored candidates from the
// backend ranking, backfills any shortfall with the best leftovers, and
// returns the selection in backend order.
inline std::vector<ScoredItem> allocate_list(std::span<const ScoredItem> ranking,
                                             const CategoryMap& categories,
                                             const DiscreteTreatment& slots, int N, int K) {
  if (ranking.size() < static_cast<std::size_t>(N)) {
    throw DomainError("allocate_list: " + std::to_string(ranking.size()) +
                      " candidates for a list of " + std::to_string(N));
  }
  auto budgets = category_budgets(slots, N, K);
  std::vector<ScoredItem> ordered(ranking.begin(), ranking.end());
  std::stable_sort(ordered.begin(), ordered.end(), ranks_before);
  std::vector<char> taken(ordered.size(), 0);
  int selected = 0;
  for (std::size_t r = 0; r < ordered.size(); ++r) {
    const int c = categories.at(ordered[r].item);
    if (c < 0 || static_cast<std::size_t>(c) >= budgets.size()) {
      throw DomainError("allocate_list: category outside the treatment");
    }
    if (budgets[static_cast<std::size_t>(c)] > 0) {
      --budgets[static_cast<std::size_t>(c)];
      taken[r] = 1;
      ++selected;
    }
  }
  for (std::size_t r = 0; r < ordered.size() && selected < N; ++r) {
    if (!taken[r]) {
      taken[r] = 1;
      ++selected;
    }
  }
  std::vector<ScoredItem> out;
  out.reserve(static_cast<std::size_t>(N));
  for (std::size_t r = 0; r < ordered.size(); ++r)
    if (taken[r]) out.push_back(ordered[r]);
  return out;
}

// s(u, i) = s0(u, i) + alpha * m[c_i]; top-N by adjusted score, ties by item id.
// N is capped at the candidate count.
inline std::vector<ScoredItem> rerank_mtef(std::span<const ScoredItem> scored,
                                           const MtefVector& mtef, double alpha,
                                           const CategoryMap& categories, int N) {
  std::vector<ScoredItem> adjusted;
  adjusted.reserve(scored.size());
  for (const auto& s : scored) {
    const int c = categories.at(s.item);
    if (c < 0 || static_cast<std::size_t>(c) >= mtef.m.size()) {
      throw DomainError("rerank_mtef: category outside the MTEF vector");
    }
    adjusted.push_back({s.item, s.score + alpha * mtef.m[static_cast<std::size_t>(c)]});
  }
  const auto n = std::min(adjusted.size(), static_cast<std::size_t>(std::max(0, N)));
  std::partial_sort(adjusted.begin(), adjusted.begin() + static_cast<std::ptrdiff_t>(n),
                    adjusted.end(), ranks_before);
  adjusted.resize(n);
  return adjusted;
}

}  // namespace upliftrec
