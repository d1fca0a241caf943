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

// Augmented (history, treatment, outcome) samples carved from interaction
// trails, treatment discretization, neighbor-vote propensities and the
// inverse-propensity-weighted dose-response grid with its finite-difference
// marginal effects.

#include <cmath>
#include <istream>
#include <optional>
#include <ostream>
#include <ranges>
#include <span>
#include <string>
#include <vector>

#include "upliftrec/apportion.hpp"
#include "upliftrec/common.hpp"
#include "upliftrec/data.hpp"

namespace upliftrec {

// Dense row-major matrix.
template <typename T>
class Grid {
 public:
  Grid() = default;
  Grid(std::size_t rows, std::size_t cols, T fill = T{})
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  T& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
  std::span<const T> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }

  friend bool operator==(const Grid&, const Grid&) = default;

 private:
  std::size_t rows_ = 0, cols_ = 0;
  std::vector<T> data_;
};

// Exposure ratio per category; sums to 1.
struct TreatmentVector {
  std::vector<double> ratios;
  std::size_t size() const { return ratios.size(); }
  friend bool operator==(const TreatmentVector&, const TreatmentVector&) = default;
};

// CTR per category over the treatment window; ctr[c] is meaningful only
// where observed[c].
struct OutcomeVector {
  std::vector<double> ctr;
  std::vector<char> observed;
  friend bool operator==(const OutcomeVector&, const OutcomeVector&) = default;
};

struct AugmentedSample {
  std::size_t sample_id = 0;
  UserId source_user = 0;
  Records history;
  TreatmentVector treatment;
  OutcomeVector outcome;
  friend bool operator==(const AugmentedSample&, const AugmentedSample&) = default;
};

// Slot count per category on a K-slot grid.
struct DiscreteTreatment {
  std::vector<int> slots;
  int K = 0;

  int total() const {
    int s = 0;
    for (int v : slots) s += v;
    return s;
  }
  std::size_t size() const { return slots.size(); }
  friend bool operator==(const DiscreteTreatment&, const DiscreteTreatment&) = default;
};

// P(c, k): share of neighbors whose discretized treatment puts k slots on
// category c, floored at `floor_value`. `raw` keeps the unclamped shares.
struct PropensityMatrix {
  Grid<double> p;
  Grid<double> raw;
  double floor_value = 0.0;

  double operator()(std::size_t c, std::size_t k) const { return p(c, k); }
  std::size_t categories() const { return p.rows(); }
  int K() const { return static_cast<int>(p.cols()) - 1; }
};

// Dose-response grid: A(c, k) is the estimated CTR of category c when it holds
// k of K slots. Column 0 is 0; unfilled cells hold `null_value`.
struct AdrfMatrix {
  Grid<double> value;
  Grid<char> filled;
  double null_value = 0.0;

  double operator()(std::size_t c, std::size_t k) const { return value(c, k); }
  std::size_t categories() const { return value.rows(); }
  int K() const { return static_cast<int>(value.cols()) - 1; }
  // Column 0 is known (zero exposure means zero clicks).
  bool known(std::size_t c, std::size_t k) const { return k == 0 || filled(c, k) != 0; }
};

struct MtefVector {
  std::vector<double> m;
  std::vector<char> filled;
  double null_value = 0.0;
  int delta = 1;
};

// Tunable knobs of the estimator and planner. Defaults follow the search
// grids used for the small benchmarks (lambda 0.5, K_s around 80).
struct HyperParams {
  double lambda = 0.5;
  int C = 3;
  int K = 5;
  int K_p = 80;
  int K_s = 80;
  double gamma = 1.0;
  int epsilon = 1;
  double v_p = 0.05;
  double v_a = 0.01;
  double v_m = 0.05;
  double alpha = 0.3;
  int delta_t = 1;
  int N = 10;

  // Throws DomainError on a hard violation. Values outside the documented
  // tuning ranges are rejected too unless allow_out_of_range is set.
  void validate(bool allow_out_of_range = false) const {
    auto hard = [](bool ok, const std::string& what) {
      if (!ok) throw DomainError("hyperparameter " + what);
    };
    hard(lambda > 0.0 && lambda < 1.0, "lambda must lie in (0,1)");
    hard(C >= 1, "C must be >= 1");
    hard(K >= 1, "K must be >= 1");
    hard(N >= 1, "N must be >= 1");
    hard(K <= N, "K must not exceed N");
    hard(K_p >= 1 && K_s >= 1, "K_p and K_s must be >= 1");
    hard(gamma >= 0.0, "gamma must be >= 0");
    hard(epsilon >= 0, "epsilon must be >= 0");
    hard(v_p > 0.0 && v_p <= 1.0, "v_p must lie in (0,1]");
    hard(delta_t >= 1, "delta_t must be >= 1");
    if (allow_out_of_range) return;
    auto soft = [](bool ok, const std::string& what) {
      if (!ok) {
        throw DomainError("hyperparameter " + what +
                          " (outside the documented range; pass the override flag to allow)");
      }
    };
    soft(C >= 2 && C <= 15, "C outside [2,15]");
    soft(epsilon <= 2, "epsilon outside {0,1,2}");
    soft(v_a >= 0.01 && v_a <= 0.1, "v_a outside [0.01,0.1]");
    soft(v_m >= 0.0 && v_m <= 0.5, "v_m outside [0,0.5]");
    soft(alpha >= 0.05 - 1e-12 && alpha <= 0.45 + 1e-12, "alpha outside [0.05,0.45]");
  }
};

// ---------------------------------------------------------------------------

struct TrailSplit {
  Records history;
  Records window;
};

// History is the first ceil(lambda * n) records of the position-sorted trail,
// the window the rest. Returns nullopt (sample skipped) when the trail has
// fewer than two records or the window would be empty.
inline std::optional<TrailSplit> split_trail(std::span<const InteractionRecord> trail,
                                             double lambda) {
  if (!(lambda > 0.0 && lambda < 1.0)) throw DomainError("split_trail: lambda must lie in (0,1)");
  if (trail.size() < 2) return std::nullopt;
  const auto n = static_cast<double>(trail.size());
  auto cut = static_cast<std::size_t>(std::ceil(lambda * n - 1e-9));
  if (cut >= trail.size()) return std::nullopt;
  TrailSplit out;
  out.history.assign(trail.begin(), trail.begin() + static_cast<std::ptrdiff_t>(cut));
  out.window.assign(trail.begin() + static_cast<std::ptrdiff_t>(cut), trail.end());
  return out;
}

namespace detail {
inline std::size_t category_of(const CategoryMap& categories, ItemId item, int C) {
  const int c = categories.at(item);
  if (c < 0 || c >= C) {
    throw DomainError("item " + std::to_string(item) + " has category " + std::to_string(c) +
                      " outside [0," + std::to_string(C) + ")");
  }
  return static_cast<std::size_t>(c);
}
}  // namespace detail

// Share of window exposures (positive or negative) per category.
inline TreatmentVector compute_treatment(std::span<const InteractionRecord> window,
                                         const CategoryMap& categories, int C) {
  if (window.empty()) throw DomainError("compute_treatment: empty window");
  std::vector<long> counts(static_cast<std::size_t>(C), 0);
  for (const auto& r : window) ++counts[detail::category_of(categories, r.item, C)];
  TreatmentVector t;
  t.ratios.resize(counts.size());
  const auto n = static_cast<double>(window.size());
  for (std::size_t c = 0; c < counts.size(); ++c) t.ratios[c] = static_cast<double>(counts[c]) / n;
  return t;
}

// Positives over exposures per category; unexposed categories are unobserved.
inline OutcomeVector compute_outcome(std::span<const InteractionRecord> window,
                                     const CategoryMap& categories, int C) {
  const auto nc = static_cast<std::size_t>(C);
  std::vector<long> exposures(nc, 0), positives(nc, 0);
  for (const auto& r : window) {
    const auto c = detail::category_of(categories, r.item, C);
    ++exposures[c];
    positives[c] += r.label;
  }
  OutcomeVector y;
  y.ctr.assign(nc, 0.0);
  y.observed.assign(nc, 0);
  for (std::size_t c = 0; c < nc; ++c) {
    if (exposures[c] > 0) {
      y.ctr[c] = static_cast<double>(positives[c]) / static_cast<double>(exposures[c]);
      y.observed[c] = 1;
    }
  }
  return y;
}

// Slot index of a single ratio: round-half-up of t * K.
inline int discretize(double ratio, int K) {
  if (K < 1) throw DomainError("discretize: K must be >= 1");
  if (!(ratio >= 0.0 && ratio <= 1.0)) throw DomainError("discretize: ratio outside [0,1]");
  return static_cast<int>(std::floor(ratio * K + 0.5 + 1e-9));
}

// Vector form: per-ratio rounding, repaired to sum to K by largest-remainder
// apportionment of t * K (the two agree whenever rounding already sums to K).
inline DiscreteTreatment discretize(const TreatmentVector& t, int K) {
  if (K < 1) throw DomainError("discretize: K must be >= 1");
  std::vector<double> quotas(t.ratios.size());
  for (std::size_t c = 0; c < quotas.size(); ++c) {
    if (!(t.ratios[c] >= 0.0 && t.ratios[c] <= 1.0)) {
      throw DomainError("discretize: ratio outside [0,1]");
    }
    quotas[c] = t.ratios[c] * K;
  }
  return {apportion_largest_remainder(quotas, K), K};
}

// One sample per user whose trail splits into non-empty history and window.
inline std::vector<AugmentedSample> build_augmented_dataset(std::span<const Trail> trails,
                                                            double lambda,
                                                            const CategoryMap& categories,
                                                            std::size_t* skipped = nullptr) {
  std::vector<AugmentedSample> samples;
  std::size_t skip = 0;
  const int C = categories.num_categories;
  for (const auto& trail : trails) {
    auto split = split_trail(trail.records, lambda);
    if (!split) {
      ++skip;
      continue;
    }
    AugmentedSample s;
    s.sample_id = samples.size();
    s.source_user = trail.user;
    s.treatment = compute_treatment(split->window, categories, C);
    s.outcome = compute_outcome(split->window, categories, C);
    s.history = std::move(split->history);
    samples.push_back(std::move(s));
  }
  if (skip > 0) {
    log_info("build_augmented_dataset: skipped " + std::to_string(skip) +
             " users with trails too short to split");
  }
  if (skipped) *skipped = skip;
  if (samples.empty()) throw DomainError("build_augmented_dataset: no eligible users");
  return samples;
}

// P(c, k) = |{j : slots_j[c] == k}| / K_p over the neighbor treatments,
// then floored at v_p.
template <std::ranges::input_range R>
  requires std::convertible_to<std::ranges::range_reference_t<R>, const DiscreteTreatment&>
PropensityMatrix estimate_propensity(R&& neighbor_treatments, int C, int K, double v_p) {
  if (C < 1 || K < 1) throw DomainError("estimate_propensity: C and K must be >= 1");
  const auto nc = static_cast<std::size_t>(C), nk = static_cast<std::size_t>(K) + 1;
  Grid<double> counts(nc, nk, 0.0);
  std::size_t n = 0;
  for (const DiscreteTreatment& t : neighbor_treatments) {
    if (t.slots.size() != nc) throw DomainError("estimate_propensity: treatment size != C");
    for (std::size_t c = 0; c < nc; ++c) {
      const int k = t.slots[c];
      if (k < 0 || k > K) throw DomainError("estimate_propensity: slot outside [0,K]");
      counts(c, static_cast<std::size_t>(k)) += 1.0;
    }
    ++n;
  }
  if (n == 0) throw DomainError("estimate_propensity: K_p must be >= 1");
  PropensityMatrix P;
  P.floor_value = v_p;
  P.raw = Grid<double>(nc, nk);
  P.p = Grid<double>(nc, nk);
  for (std::size_t c = 0; c < nc; ++c) {
    for (std::size_t k = 0; k < nk; ++k) {
      P.raw(c, k) = counts(c, k) / static_cast<double>(n);
      P.p(c, k) = std::max(P.raw(c, k), v_p);
    }
  }
  return P;
}

// A(c, k) for k >= 1: mean outcome of category c over the neighbors that put
// exactly k slots on c and observed it, divided by P(c, k)^gamma. Cells
// without contributors hold v_a; column 0 is 0.
template <std::ranges::input_range R>
  requires std::convertible_to<std::ranges::range_reference_t<R>, const AugmentedSample&>
AdrfMatrix estimate_adrf(R&& neighbors, const PropensityMatrix& P, double gamma, double v_a,
                         int C, int K) {
  const auto nc = static_cast<std::size_t>(C), nk = static_cast<std::size_t>(K) + 1;
  if (P.p.rows() != nc || P.p.cols() != nk) {
    throw DomainError("estimate_adrf: propensity shape does not match C x (K+1)");
  }
  Grid<double> sum(nc, nk, 0.0);
  Grid<long> count(nc, nk, 0);
  for (const AugmentedSample& s : neighbors) {
    if (s.treatment.size() != nc || s.outcome.ctr.size() != nc) {
      throw DomainError("estimate_adrf: sample has the wrong category count");
    }
    const auto slots = discretize(s.treatment, K);
    for (std::size_t c = 0; c < nc; ++c) {
      const auto k = static_cast<std::size_t>(slots.slots[c]);
      if (k == 0 || !s.outcome.observed[c]) continue;
      sum(c, k) += s.outcome.ctr[c];
      count(c, k) += 1;
    }
  }
  AdrfMatrix A;
  A.null_value = v_a;
  A.value = Grid<double>(nc, nk, v_a);
  A.filled = Grid<char>(nc, nk, 0);
  for (std::size_t c = 0; c < nc; ++c) {
    A.value(c, 0) = 0.0;
    for (std::size_t k = 1; k < nk; ++k) {
      if (count(c, k) == 0) continue;
      const double mean = sum(c, k) / static_cast<double>(count(c, k));
      A.value(c, k) = mean / std::pow(P(c, k), gamma);
      A.filled(c, k) = 1;
    }
  }
  return A;
}

// How neighbors' outcomes are combined into a dose-response cell.
enum class AdrfWeighting {
  // Weighted mean of outcomes with weight 1 / P_j(c, k)^gamma, where P_j is
  // the neighbor's own propensity matrix. gamma = 0 gives the plain mean.
  kNeighborPropensity,
  // Plain slot mean divided by the target user's P(c, k)^gamma.
  kTargetPropensity,
};

// Neighbor-propensity estimate. `propensity_of(sample)` returns the
// (clamped) propensity matrix estimated around that sample.
template <std::ranges::input_range R, typename PropensityOf>
  requires std::convertible_to<std::ranges::range_reference_t<R>, const AugmentedSample&> &&
           std::invocable<PropensityOf&, const AugmentedSample&>
AdrfMatrix estimate_adrf_weighted(R&& neighbors, PropensityOf&& propensity_of, double gamma,
                                  double v_a, int C, int K) {
  const auto nc = static_cast<std::size_t>(C), nk = static_cast<std::size_t>(K) + 1;
  Grid<double> weighted(nc, nk, 0.0), weights(nc, nk, 0.0);
  for (const AugmentedSample& s : neighbors) {
    if (s.treatment.size() != nc || s.outcome.ctr.size() != nc) {
      throw DomainError("estimate_adrf_weighted: sample has the wrong category count");
    }
    const PropensityMatrix& P = propensity_of(s);
    if (P.p.rows() != nc || P.p.cols() != nk) {
      throw DomainError("estimate_adrf_weighted: propensity shape does not match C x (K+1)");
    }
    const auto slots = discretize(s.treatment, K);
    for (std::size_t c = 0; c < nc; ++c) {
      const auto k = static_cast<std::size_t>(slots.slots[c]);
      if (k == 0 || !s.outcome.observed[c]) continue;
      const double w = 1.0 / std::pow(P(c, k), gamma);
      weighted(c, k) += w * s.outcome.ctr[c];
      weights(c, k) += w;
    }
  }
  AdrfMatrix A;
  A.null_value = v_a;
  A.value = Grid<double>(nc, nk, v_a);
  A.filled = Grid<char>(nc, nk, 0);
  for (std::size_t c = 0; c < nc; ++c) {
    A.value(c, 0) = 0.0;
    for (std::size_t k = 1; k < nk; ++k) {
      if (weights(c, k) == 0.0) continue;
      A.value(c, k) = weighted(c, k) / weights(c, k);
      A.filled(c, k) = 1;
    }
  }
  return A;
}

// m[c] = (A(c, t0_c + delta) - A(c, t0_c)) / delta when both cells are known
// and the step stays on the grid, else v_m.
inline MtefVector compute_mtef(const AdrfMatrix& A, const DiscreteTreatment& t0, int delta_t,
                               double v_m) {
  if (delta_t < 1) throw DomainError("compute_mtef: delta_t must be >= 1");
  const auto nc = A.categories();
  if (t0.slots.size() != nc) throw DomainError("compute_mtef: t0 size != C");
  const int K = A.K();
  MtefVector out;
  out.null_value = v_m;
  out.delta = delta_t;
  out.m.assign(nc, v_m);
  out.filled.assign(nc, 0);
  for (std::size_t c = 0; c < nc; ++c) {
    const int from = t0.slots[c], to = from + delta_t;
    if (from < 0 || to > K) continue;
    const auto f = static_cast<std::size_t>(from), t = static_cast<std::size_t>(to);
    if (!A.known(c, f) || !A.known(c, t)) continue;
    out.m[c] = (A(c, t) - A(c, f)) / delta_t;
    out.filled[c] = 1;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Persistence

// `sample_id <TAB> source_user <TAB> t1,..,tC <TAB> y1:o1,..,yC:oC <TAB> history`
// where history is `item:label:position` triples joined by ';' ("-" if empty).
inline void write_augmented(std::ostream& out, std::span<const AugmentedSample> samples) {
  for (const auto& s : samples) {
    out << s.sample_id << '\t' << s.source_user << '\t';
    for (std::size_t c = 0; c < s.treatment.size(); ++c) {
      out << (c ? "," : "") << format_double(s.treatment.ratios[c]);
    }
    out << '\t';
    for (std::size_t c = 0; c < s.outcome.ctr.size(); ++c) {
      out << (c ? "," : "") << format_double(s.outcome.ctr[c]) << ':'
          << (s.outcome.observed[c] ? 1 : 0);
    }
    out << '\t';
    if (s.history.empty()) out << '-';
    for (std::size_t h = 0; h < s.history.size(); ++h) {
      const auto& r = s.history[h];
      out << (h ? ";" : "") << r.item << ':' << r.label << ':' << r.position;
    }
    out << '\n';
  }
}

inline std::vector<AugmentedSample> read_augmented(std::istream& in) {
  std::vector<AugmentedSample> samples;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    auto f = split_fields(line, '\t');
    if (f.size() != 5) throw ParseError(lineno, "expected 5 fields");
    AugmentedSample s;
    if (!parse_int(f[0], s.sample_id) || !parse_int(f[1], s.source_user)) {
      throw ParseError(lineno, "bad sample id or user");
    }
    for (auto tok : split_fields(f[2], ',')) {
      double v = 0;
      if (!parse_double(tok, v)) throw ParseError(lineno, "bad treatment ratio");
      s.treatment.ratios.push_back(v);
    }
    for (auto tok : split_fields(f[3], ',')) {
      auto pair = split_fields(tok, ':');
      double v = 0;
      int o = 0;
      if (pair.size() != 2 || !parse_double(pair[0], v) || !parse_int(pair[1], o)) {
        throw ParseError(lineno, "bad outcome pair");
      }
      s.outcome.ctr.push_back(v);
      s.outcome.observed.push_back(static_cast<char>(o != 0));
    }
    if (s.outcome.ctr.size() != s.treatment.size()) {
      throw ParseError(lineno, "treatment and outcome lengths differ");
    }
    if (f[4] != "-") {
      for (auto tok : split_fields(f[4], ';')) {
        auto triple = split_fields(tok, ':');
        InteractionRecord r;
        r.user = s.source_user;
        if (triple.size() != 3 || !parse_int(triple[0], r.item) || !parse_int(triple[1], r.label) ||
            !parse_int(triple[2], r.position)) {
          throw ParseError(lineno, "bad history entry");
        }
        s.history.push_back(r);
      }
    }
    samples.push_back(std::move(s));
  }
  return samples;
}

// One `name <TAB> c <TAB> v0 .. vK` line per row.
inline void dump_grid(std::ostream& out, std::string_view name, const Grid<double>& g) {
  for (std::size_t r = 0; r < g.rows(); ++r) {
    out << name << '\t' << r;
    for (std::size_t c = 0; c < g.cols(); ++c) out << '\t' << format_double(g(r, c));
    out << '\n';
  }
}

}  // namespace upliftrec
