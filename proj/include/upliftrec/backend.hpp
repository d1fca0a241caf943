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

// Matrix-factorization backend: training on positive feedback with sampled
// negatives, dot-product scoring, top-N lists, k-means over item embeddings
// and cosine nearest-neighbor retrieval.

#include <algorithm>
#include <cmath>
#include <functional>
#include <istream>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <set>
#include <span>
#include <sstream>
#include <unordered_set>
#include <vector>

#include "upliftrec/common.hpp"
#include "upliftrec/data.hpp"

namespace upliftrec {

inline constexpr int kMaxEmbeddingDim = 512;

enum class LossKind { kPointwiseBce, kPairwiseBpr };

struct TrainConfig {
  int dim = 64;
  int neg_ratio = 4;
  double learning_rate = 0.05;
  int epochs = 30;
  double l2 = 1e-4;
  double init_scale = 0.1;
  std::uint64_t seed = 0;
  LossKind loss = LossKind::kPointwiseBce;
};

struct ModelState {
  int dim = 0;
  std::uint64_t seed = 0;
  std::map<UserId, Vector> users;
  std::map<ItemId, Vector> items;
  std::vector<double> epoch_loss;  // not persisted

  const Vector& user(UserId id) const {
    auto it = users.find(id);
    if (it == users.end()) throw DomainError("unknown user " + std::to_string(id));
    return it->second;
  }
  const Vector& item(ItemId id) const {
    auto it = items.find(id);
    if (it == items.end()) throw DomainError("unknown item " + std::to_string(id));
    return it->second;
  }

  friend bool operator==(const ModelState& a, const ModelState& b) {
    return a.dim == b.dim && a.seed == b.seed && a.users == b.users && a.items == b.items;
  }
};

inline double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DomainError("dot: dimension mismatch");
  double s = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) s += a[k] * b[k];
  return s;
}

namespace detail {

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// -log(sigmoid(x)), stable for large |x|.
inline double softplus_neg(double x) {
  return x >= 0 ? std::log1p(std::exp(-x)) : -x + std::log1p(std::exp(x));
}

}  // namespace detail

// Trains MF on the positive records in `interactions` (negatives in the log
// are ignored; training negatives are sampled uniformly from `catalog`
// among the user's non-positive items). Users in `extra_users` receive an
// embedding even without positives. epochs = 0 returns the initialization.
inline ModelState train_mf(std::span<const InteractionRecord> interactions,
                           std::span<const ItemId> catalog, const TrainConfig& config,
                           std::span<const UserId> extra_users = {}) {
  if (config.dim < 1 || config.dim > kMaxEmbeddingDim) {
    throw DomainError("train_mf: dim must lie in [1, 512]");
  }
  if (config.neg_ratio < 0) throw DomainError("train_mf: negative neg_ratio");
  if (catalog.empty()) throw DomainError("train_mf: empty catalog");

  std::set<UserId> user_set(extra_users.begin(), extra_users.end());
  std::set<ItemId> item_set(catalog.begin(), catalog.end());
  for (const auto& r : interactions) {
    user_set.insert(r.user);
    if (!item_set.count(r.item)) {
      throw DomainError("train_mf: item " + std::to_string(r.item) + " not in catalog");
    }
  }
  const std::vector<UserId> users(user_set.begin(), user_set.end());
  const std::vector<ItemId> items(item_set.begin(), item_set.end());
  std::map<UserId, std::size_t> user_index;
  std::map<ItemId, std::size_t> item_index;
  for (std::size_t u = 0; u < users.size(); ++u) user_index[users[u]] = u;
  for (std::size_t i = 0; i < items.size(); ++i) item_index[items[i]] = i;

  const auto d = static_cast<std::size_t>(config.dim);
  std::mt19937_64 rng(config.seed);
  std::normal_distribution<double> init(0.0, config.init_scale);
  std::vector<double> P(users.size() * d), Q(items.size() * d);
  for (auto& v : P) v = init(rng);
  for (auto& v : Q) v = init(rng);

  std::vector<std::pair<std::size_t, std::size_t>> positives;
  std::vector<std::unordered_set<std::size_t>> liked(users.size());
  for (const auto& r : interactions) {
    if (r.label != 1) continue;
    const auto u = user_index.at(r.user), i = item_index.at(r.item);
    if (liked[u].insert(i).second) positives.emplace_back(u, i);
  }

  ModelState model;
  model.dim = config.dim;
  model.seed = config.seed;

  std::uniform_int_distribution<std::size_t> pick_item(0, items.size() - 1);
  auto sample_negative = [&](std::size_t u) -> std::optional<std::size_t> {
    if (liked[u].size() >= items.size()) return std::nullopt;
    for (int attempt = 0; attempt < 64; ++attempt) {
      const auto j = pick_item(rng);
      if (!liked[u].count(j)) return j;
    }
    return std::nullopt;
  };

  std::vector<double> pu_old(d);
  auto pointwise_step = [&](std::size_t u, std::size_t i, double y) {
    double* pu = &P[u * d];
    double* qi = &Q[i * d];
    const double s = dot({pu, d}, {qi, d});
    const double g = detail::sigmoid(s) - y;
    const double lr = config.learning_rate, l2 = config.l2;
    std::copy(pu, pu + d, pu_old.begin());
    for (std::size_t k = 0; k < d; ++k) pu[k] -= lr * (g * qi[k] + l2 * pu[k]);
    for (std::size_t k = 0; k < d; ++k) qi[k] -= lr * (g * pu_old[k] + l2 * qi[k]);
    return y > 0.5 ? detail::softplus_neg(s) : detail::softplus_neg(-s);
  };
  auto pairwise_step = [&](std::size_t u, std::size_t i, std::size_t j) {
    double* pu = &P[u * d];
    double* qi = &Q[i * d];
    double* qj = &Q[j * d];
    const double x = dot({pu, d}, {qi, d}) - dot({pu, d}, {qj, d});
    const double g = -detail::sigmoid(-x);
    const double lr = config.learning_rate, l2 = config.l2;
    std::copy(pu, pu + d, pu_old.begin());
    for (std::size_t k = 0; k < d; ++k) pu[k] -= lr * (g * (qi[k] - qj[k]) + l2 * pu[k]);
    for (std::size_t k = 0; k < d; ++k) qi[k] -= lr * (g * pu_old[k] + l2 * qi[k]);
    for (std::size_t k = 0; k < d; ++k) qj[k] -= lr * (-g * pu_old[k] + l2 * qj[k]);
    return detail::softplus_neg(x);
  };

  std::vector<std::size_t> order(positives.size());
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0.0;
    std::size_t terms = 0;
    for (std::size_t idx : order) {
      const auto [u, i] = positives[idx];
      double loss = 0.0;
      if (config.loss == LossKind::kPointwiseBce) {
        loss += pointwise_step(u, i, 1.0);
        ++terms;
        for (int n = 0; n < config.neg_ratio; ++n) {
          if (auto j = sample_negative(u)) {
            loss += pointwise_step(u, *j, 0.0);
            ++terms;
          }
        }
      } else {
        for (int n = 0; n < std::max(1, config.neg_ratio); ++n) {
          if (auto j = sample_negative(u)) {
            loss += pairwise_step(u, i, *j);
            ++terms;
          }
        }
      }
      if (!std::isfinite(loss)) {
        std::ostringstream msg;
        msg << "train_mf: non-finite loss at epoch " << epoch << " (user "
            << users[u] << ", item " << items[i] << ", lr " << config.learning_rate
            << ", l2 " << config.l2 << ")";
        throw Error(msg.str());
      }
      total += loss;
    }
    model.epoch_loss.push_back(terms ? total / static_cast<double>(terms) : 0.0);
  }
  const auto& L = model.epoch_loss;
  if (L.size() >= 3) {
    const auto n = L.size();
    if (L[n - 1] > L[n - 2] || L[n - 2] > L[n - 3]) {
      log_warn("train_mf: epoch loss increased over the final 3 epochs");
    }
  }

  for (std::size_t u = 0; u < users.size(); ++u) {
    model.users[users[u]] = Vector(P.begin() + u * d, P.begin() + (u + 1) * d);
  }
  for (std::size_t i = 0; i < items.size(); ++i) {
    model.items[items[i]] = Vector(Q.begin() + i * d, Q.begin() + (i + 1) * d);
  }
  return model;
}

inline double score(const ModelState& model, UserId user, ItemId item) {
  return dot(model.user(user), model.item(item));
}

struct ScoredItem {
  ItemId item = 0;
  double score = 0.0;
  friend bool operator==(const ScoredItem&, const ScoredItem&) = default;
};

// Descending score, ascending item id on ties.
inline bool ranks_before(const ScoredItem& a, const ScoredItem& b) {
  if (a.score != b.score) return a.score > b.score;
  return a.item < b.item;
}

// Catalog minus the items in the user's training history.
inline std::vector<ItemId> candidate_pool(std::span<const ItemId> catalog,
                                          std::span<const InteractionRecord> history) {
  std::unordered_set<ItemId> seen;
  for (const auto& r : history) seen.insert(r.item);
  std::vector<ItemId> out;
  for (ItemId i : catalog)
    if (!seen.count(i)) out.push_back(i);
  return out;
}

// Every candidate scored and sorted by ranks_before.
inline std::vector<ScoredItem> rank_candidates(const ModelState& model, UserId user,
                                               std::span<const ItemId> candidates) {
  const Vector& pu = model.user(user);
  std::vector<ScoredItem> out;
  out.reserve(candidates.size());
  for (ItemId i : candidates) out.push_back({i, dot(pu, model.item(i))});
  std::sort(out.begin(), out.end(), ranks_before);
  return out;
}

inline std::vector<ScoredItem> top_n(const ModelState& model, UserId user,
                                     std::span<const ItemId> candidates, std::size_t n) {
  if (n > candidates.size()) {
    throw DomainError("top_n: N=" + std::to_string(n) + " exceeds " +
                      std::to_string(candidates.size()) + " candidates");
  }
  auto ranked = rank_candidates(model, user, candidates);
  ranked.resize(n);
  return ranked;
}

// ---------------------------------------------------------------------------
// k-means

struct KMeansResult {
  std::vector<int> assignment;
  std::vector<Vector> centroids;
  int iterations = 0;
};

inline double squared_distance(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    const double t = a[k] - b[k];
    s += t * t;
  }
  return s;
}

// Lloyd iterations from k-means++ seeding. Stops after max_iter rounds or
// once no centroid moves more than tol. A cluster that empties out is
// re-seeded with the point farthest from its own centroid.
inline KMeansResult kmeans(std::span<const Vector> points, int k, std::uint64_t seed,
                           int max_iter = 100, double tol = 1e-6) {
  const auto n = points.size();
  if (k < 1) throw DomainError("kmeans: k must be >= 1");
  if (static_cast<std::size_t>(k) > n) {
    throw DomainError("kmeans: k=" + std::to_string(k) + " exceeds " + std::to_string(n) +
                      " points");
  }
  const auto K = static_cast<std::size_t>(k);
  std::mt19937_64 rng(seed);
  KMeansResult res;

  // k-means++ seeding.
  std::vector<double> nearest(n, std::numeric_limits<double>::infinity());
  std::uniform_int_distribution<std::size_t> uniform(0, n - 1);
  res.centroids.push_back(points[uniform(rng)]);
  while (res.centroids.size() < K) {
    double total = 0.0;
    for (std::size_t p = 0; p < n; ++p) {
      nearest[p] = std::min(nearest[p], squared_distance(points[p], res.centroids.back()));
      total += nearest[p];
    }
    std::size_t chosen = 0;
    if (total > 0.0) {
      std::uniform_real_distribution<double> u01(0.0, total);
      double target = u01(rng), acc = 0.0;
      chosen = n - 1;
      for (std::size_t p = 0; p < n; ++p) {
        acc += nearest[p];
        if (acc >= target && nearest[p] > 0.0) {
          chosen = p;
          break;
        }
      }
    } else {
      chosen = uniform(rng);
    }
    res.centroids.push_back(points[chosen]);
  }

  res.assignment.assign(n, 0);
  std::vector<double> dist(n, 0.0);
  auto assign = [&] {
    for (std::size_t p = 0; p < n; ++p) {
      double best = std::numeric_limits<double>::infinity();
      int arg = 0;
      for (std::size_t c = 0; c < K; ++c) {
        const double dd = squared_distance(points[p], res.centroids[c]);
        if (dd < best) {
          best = dd;
          arg = static_cast<int>(c);
        }
      }
      res.assignment[p] = arg;
      dist[p] = best;
    }
  };
  // Moves the farthest point of any multi-point cluster into each empty one.
  auto fill_empty = [&] {
    std::vector<std::size_t> sizes(K, 0);
    for (int a : res.assignment) ++sizes[static_cast<std::size_t>(a)];
    for (std::size_t c = 0; c < K; ++c) {
      if (sizes[c] != 0) continue;
      std::size_t far = n;
      double far_d = -1.0;
      for (std::size_t p = 0; p < n; ++p) {
        if (sizes[static_cast<std::size_t>(res.assignment[p])] > 1 && dist[p] > far_d) {
          far_d = dist[p];
          far = p;
        }
      }
      if (far == n) return;  // fewer distinct groups than clusters
      --sizes[static_cast<std::size_t>(res.assignment[far])];
      res.assignment[far] = static_cast<int>(c);
      ++sizes[c];
      dist[far] = 0.0;
      res.centroids[c] = points[far];
    }
  };

  const std::size_t dim = points.front().size();
  for (res.iterations = 0; res.iterations < max_iter;) {
    assign();
    fill_empty();
    ++res.iterations;
    std::vector<Vector> next(K, Vector(dim, 0.0));
    std::vector<std::size_t> sizes(K, 0);
    for (std::size_t p = 0; p < n; ++p) {
      const auto c = static_cast<std::size_t>(res.assignment[p]);
      ++sizes[c];
      for (std::size_t j = 0; j < dim; ++j) next[c][j] += points[p][j];
    }
    double shift = 0.0;
    for (std::size_t c = 0; c < K; ++c) {
      if (sizes[c] == 0) {
        next[c] = res.centroids[c];
        continue;
      }
      for (auto& v : next[c]) v /= static_cast<double>(sizes[c]);
      shift = std::max(shift, std::sqrt(squared_distance(next[c], res.centroids[c])));
    }
    res.centroids = std::move(next);
    if (shift < tol) break;
  }
  assign();
  fill_empty();
  return res;
}

// Clusters the model's item embeddings into C categories.
inline CategoryMap cluster_items(const ModelState& model, int num_categories, std::uint64_t seed) {
  std::vector<ItemId> ids;
  std::vector<Vector> points;
  ids.reserve(model.items.size());
  points.reserve(model.items.size());
  for (const auto& [id, v] : model.items) {
    ids.push_back(id);
    points.push_back(v);
  }
  if (num_categories < 1) throw DomainError("cluster_items: C must be >= 1");
  if (static_cast<std::size_t>(num_categories) > ids.size()) {
    throw DomainError("cluster_items: C=" + std::to_string(num_categories) + " exceeds " +
                      std::to_string(ids.size()) + " items");
  }
  auto res = kmeans(points, num_categories, seed);
  CategoryMap map;
  map.num_categories = num_categories;
  for (std::size_t p = 0; p < ids.size(); ++p) map.assignment[ids[p]] = res.assignment[p];
  return map;
}

// ---------------------------------------------------------------------------
// Cosine retrieval

inline double norm(std::span<const double> v) { return std::sqrt(dot(v, v)); }

// Zero-norm arguments have similarity 0 with everything.
inline double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  const double na = norm(a), nb = norm(b);
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot(a, b) / (na * nb);
}

struct Neighbor {
  std::size_t index = 0;
  double similarity = 0.0;
};

// Top-k samples by cosine similarity to the query, ties by ascending index.
// Samples rejected by `admit` are skipped; k is capped at the admitted count.
inline std::vector<Neighbor> nearest_samples(
    std::span<const double> query, std::span<const Vector> samples, std::size_t k,
    const std::function<bool(std::size_t)>& admit = {}) {
  const double qn = norm(query);
  if (qn == 0.0) throw DomainError("nearest_samples: zero-norm query");
  std::vector<Neighbor> all;
  all.reserve(samples.size());
  for (std::size_t s = 0; s < samples.size(); ++s) {
    if (admit && !admit(s)) continue;
    const double sn = norm(samples[s]);
    all.push_back({s, sn == 0.0 ? 0.0 : dot(query, samples[s]) / (qn * sn)});
  }
  if (!admit && k > samples.size()) {
    throw DomainError("nearest_samples: K=" + std::to_string(k) + " exceeds " +
                      std::to_string(samples.size()) + " samples");
  }
  k = std::min(k, all.size());
  auto before = [](const Neighbor& a, const Neighbor& b) {
    if (a.similarity != b.similarity) return a.similarity > b.similarity;
    return a.index < b.index;
  };
  std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(k), all.end(), before);
  all.resize(k);
  return all;
}

// Unit-normalized copies of a fixed sample set for repeated cosine queries.
// Returns the same neighbors as nearest_samples.
class CosineIndex {
 public:
  CosineIndex() = default;
  explicit CosineIndex(std::span<const Vector> samples) : norms_(samples.size()) {
    rows_.reserve(samples.size());
    for (std::size_t s = 0; s < samples.size(); ++s) {
      norms_[s] = norm(samples[s]);
      rows_.push_back(samples[s]);
    }
  }

  std::size_t size() const { return rows_.size(); }

  std::vector<Neighbor> query(std::span<const double> q, std::size_t k,
                              const std::function<bool(std::size_t)>& admit = {}) const {
    const double qn = norm(q);
    if (qn == 0.0) throw DomainError("CosineIndex: zero-norm query");
    std::vector<Neighbor> all;
    all.reserve(rows_.size());
    for (std::size_t s = 0; s < rows_.size(); ++s) {
      if (admit && !admit(s)) continue;
      all.push_back({s, norms_[s] == 0.0 ? 0.0 : dot(q, rows_[s]) / (qn * norms_[s])});
    }
    k = std::min(k, all.size());
    auto before = [](const Neighbor& a, const Neighbor& b) {
      if (a.similarity != b.similarity) return a.similarity > b.similarity;
      return a.index < b.index;
    };
    if (k < all.size()) {
      std::nth_element(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(k), all.end(), before);
      all.resize(k);
    }
    std::sort(all.begin(), all.end(), before);
    return all;
  }

 private:
  std::vector<Vector> rows_;
  std::vector<double> norms_;
};

// ---------------------------------------------------------------------------
// Persistence

inline void save_model(std::ostream& out, const ModelState& model) {
  out << "upliftrec-mf\t1\tdim\t" << model.dim << "\tusers\t" << model.users.size()
      << "\titems\t" << model.items.size() << "\tseed\t" << model.seed << '\n';
  auto row = [&](char tag, std::int64_t id, const Vector& v) {
    out << tag << '\t' << id;
    for (double x : v) out << '\t' << format_double(x);
    out << '\n';
  };
  for (const auto& [id, v] : model.users) row('U', id, v);
  for (const auto& [id, v] : model.items) row('I', id, v);
}

inline ModelState load_model(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw ParseError(1, "empty model file");
  auto header = split_fields(line, '\t');
  ModelState model;
  std::size_t n_users = 0, n_items = 0;
  if (header.size() != 10 || header[0] != "upliftrec-mf" || header[1] != "1" ||
      !parse_int(header[3], model.dim) || !parse_int(header[5], n_users) ||
      !parse_int(header[7], n_items) || !parse_int(header[9], model.seed)) {
    throw ParseError(1, "bad model header");
  }
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    auto f = split_fields(line, '\t');
    if (f.size() != static_cast<std::size_t>(model.dim) + 2 || (f[0] != "U" && f[0] != "I")) {
      throw ParseError(lineno, "bad model row");
    }
    std::int64_t id = 0;
    if (!parse_int(f[1], id)) throw ParseError(lineno, "bad id");
    Vector v(static_cast<std::size_t>(model.dim));
    for (std::size_t k = 0; k < v.size(); ++k) {
      if (!parse_double(f[k + 2], v[k]) || !std::isfinite(v[k])) {
        throw ParseError(lineno, "bad vector component");
      }
    }
    (f[0] == "U" ? model.users : model.items)[id] = std::move(v);
  }
  if (model.users.size() != n_users || model.items.size() != n_items) {
    throw ParseError(lineno, "model row count does not match header");
  }
  return model;
}

// Tab-separated `kind id v1..vd` rows for inspection.
inline void export_embeddings(std::ostream& out, const ModelState& model) {
  for (const auto& [id, v] : model.users) {
    out << "user\t" << id;
    for (double x : v) out << '\t' << x;
    out << '\n';
  }
  for (const auto& [id, v] : model.items) {
    out << "item\t" << id;
    for (double x : v) out << '\t' << x;
    out << '\n';
  }
}

}  // namespace upliftrec
