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

// End-to-end orchestration: load -> train -> cluster -> augment -> estimate
// -> plan -> evaluate. Every stage is keyed by a hash of its inputs and the
// config subset it reads; artifacts persist under <output>/<stage>/ and can
// be resumed. An in-memory cache lets single-axis sweeps share upstream
// stages.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <random>
#include <ranges>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "upliftrec/backend.hpp"
#include "upliftrec/causal.hpp"
#include "upliftrec/common.hpp"
#include "upliftrec/data.hpp"
#include "upliftrec/eval.hpp"
#include "upliftrec/planner.hpp"

namespace upliftrec {

namespace fs = std::filesystem;

enum class Policy { kRandom, kBackend, kMtef, kAdrf };

inline std::string to_string(Policy p) {
  switch (p) {
    case Policy::kRandom: return "random";
    case Policy::kBackend: return "backend";
    case Policy::kMtef: return "mtef";
    case Policy::kAdrf: return "adrf";
  }
  return "?";
}

inline Policy parse_policy(std::string_view s) {
  if (s == "random") return Policy::kRandom;
  if (s == "backend") return Policy::kBackend;
  if (s == "mtef") return Policy::kMtef;
  if (s == "adrf") return Policy::kAdrf;
  throw DomainError("unknown policy '" + std::string(s) + "' (random|backend|mtef|adrf)");
}

struct DataConfig {
  std::string train;
  std::string valid;
  std::string test;
  std::string unbiased;    // split into valid/test when valid/test are unset
  std::string categories;  // optional item labels, used for RUE
  bool has_position = false;
  double valid_ratio = 0.5;
};

struct RunConfig {
  DataConfig data;
  HyperParams hp;
  TrainConfig train;
  Policy policy = Policy::kMtef;
  DeviationMode deviation = DeviationMode::kPerCategory;
  AdrfWeighting weighting = AdrfWeighting::kNeighborPropensity;
  std::vector<int> cutoffs{10};
  std::uint64_t seed = 0;
  std::string output_dir = "upliftrec-out";
  std::string eval_split = "test";
  bool allow_out_of_range = false;
  unsigned threads = 0;

  void validate() const {
    hp.validate(allow_out_of_range);
    if (train.dim < 1 || train.dim > kMaxEmbeddingDim) {
      throw DomainError("train.d must lie in [1, 512]");
    }
    if (!allow_out_of_range && train.neg_ratio != 4 && train.neg_ratio != 24) {
      throw DomainError("train.neg_ratio outside {4, 24} (pass the override flag to allow)");
    }
    if (train.epochs < 0) throw DomainError("train.epochs must be >= 0");
    if (cutoffs.empty()) throw DomainError("cutoffs must not be empty");
    for (int c : cutoffs) {
      if (c < 1 || c > hp.N) throw DomainError("every cutoff must lie in [1, N]");
    }
    if (eval_split != "test" && eval_split != "valid") {
      throw DomainError("eval_split must be 'test' or 'valid'");
    }
  }
};

// ---------------------------------------------------------------------------
// Config <-> JSON. Hyperparameters sit at top level under their own names.

inline nlohmann::json config_to_json(const RunConfig& c) {
  nlohmann::json j;
  j["data"] = {{"train", c.data.train},       {"valid", c.data.valid},
               {"test", c.data.test},         {"unbiased", c.data.unbiased},
               {"categories", c.data.categories}, {"has_position", c.data.has_position},
               {"valid_ratio", c.data.valid_ratio}};
  j["lambda"] = c.hp.lambda;
  j["C"] = c.hp.C;
  j["K"] = c.hp.K;
  j["K_p"] = c.hp.K_p;
  j["K_s"] = c.hp.K_s;
  j["gamma"] = c.hp.gamma;
  j["epsilon"] = c.hp.epsilon;
  j["v_p"] = c.hp.v_p;
  j["v_a"] = c.hp.v_a;
  j["v_m"] = c.hp.v_m;
  j["alpha"] = c.hp.alpha;
  j["delta_t"] = c.hp.delta_t;
  j["N"] = c.hp.N;
  j["train"] = {{"d", c.train.dim},
                {"neg_ratio", c.train.neg_ratio},
                {"learning_rate", c.train.learning_rate},
                {"epochs", c.train.epochs},
                {"l2", c.train.l2},
                {"init_scale", c.train.init_scale},
                {"seed", c.train.seed},
                {"loss", c.train.loss == LossKind::kPointwiseBce ? "bce" : "bpr"}};
  j["policy"] = to_string(c.policy);
  j["deviation"] = c.deviation == DeviationMode::kPerCategory ? "per-category" : "aggregate";
  j["adrf_weighting"] = c.weighting == AdrfWeighting::kNeighborPropensity ? "neighbor" : "target";
  j["cutoffs"] = c.cutoffs;
  j["seed"] = c.seed;
  j["output"] = c.output_dir;
  j["eval_split"] = c.eval_split;
  j["allow_out_of_range"] = c.allow_out_of_range;
  j["threads"] = c.threads;
  return j;
}

inline RunConfig config_from_json(const nlohmann::json& j) {
  static const std::set<std::string> kTop{
      "data", "lambda", "C", "K", "K_p", "K_s", "gamma", "epsilon", "v_p", "v_a", "v_m",
      "alpha", "delta_t", "N", "train", "policy", "deviation", "adrf_weighting", "cutoffs",
      "seed", "output", "eval_split", "allow_out_of_range", "threads"};
  static const std::set<std::string> kData{"train", "valid", "test", "unbiased",
                                           "categories", "has_position", "valid_ratio"};
  static const std::set<std::string> kTrain{"d", "neg_ratio", "learning_rate", "epochs",
                                            "l2", "init_scale", "seed", "loss"};
  if (!j.is_object()) throw DomainError("config: top level must be an object");
  auto check_keys = [](const nlohmann::json& obj, const std::set<std::string>& allowed,
                       const std::string& where) {
    for (const auto& [k, v] : obj.items()) {
      if (!allowed.count(k)) throw DomainError("config: unknown key '" + where + k + "'");
    }
  };
  check_keys(j, kTop, "");
  RunConfig c;
  try {
    if (j.contains("data")) {
      const auto& d = j["data"];
      check_keys(d, kData, "data.");
      c.data.train = d.value("train", c.data.train);
      c.data.valid = d.value("valid", c.data.valid);
      c.data.test = d.value("test", c.data.test);
      c.data.unbiased = d.value("unbiased", c.data.unbiased);
      c.data.categories = d.value("categories", c.data.categories);
      c.data.has_position = d.value("has_position", c.data.has_position);
      c.data.valid_ratio = d.value("valid_ratio", c.data.valid_ratio);
    }
    c.hp.lambda = j.value("lambda", c.hp.lambda);
    c.hp.C = j.value("C", c.hp.C);
    c.hp.K = j.value("K", c.hp.K);
    c.hp.K_p = j.value("K_p", c.hp.K_p);
    c.hp.K_s = j.value("K_s", c.hp.K_s);
    c.hp.gamma = j.value("gamma", c.hp.gamma);
    c.hp.epsilon = j.value("epsilon", c.hp.epsilon);
    c.hp.v_p = j.value("v_p", c.hp.v_p);
    c.hp.v_a = j.value("v_a", c.hp.v_a);
    c.hp.v_m = j.value("v_m", c.hp.v_m);
    c.hp.alpha = j.value("alpha", c.hp.alpha);
    c.hp.delta_t = j.value("delta_t", c.hp.delta_t);
    c.hp.N = j.value("N", c.hp.N);
    c.seed = j.value("seed", c.seed);
    c.train.seed = c.seed;
    if (j.contains("train")) {
      const auto& t = j["train"];
      check_keys(t, kTrain, "train.");
      c.train.dim = t.value("d", c.train.dim);
      c.train.neg_ratio = t.value("neg_ratio", c.train.neg_ratio);
      c.train.learning_rate = t.value("learning_rate", c.train.learning_rate);
      c.train.epochs = t.value("epochs", c.train.epochs);
      c.train.l2 = t.value("l2", c.train.l2);
      c.train.init_scale = t.value("init_scale", c.train.init_scale);
      c.train.seed = t.value("seed", c.train.seed);
      const auto loss = t.value("loss", std::string("bce"));
      if (loss == "bce") c.train.loss = LossKind::kPointwiseBce;
      else if (loss == "bpr") c.train.loss = LossKind::kPairwiseBpr;
      else throw DomainError("config: train.loss must be 'bce' or 'bpr'");
    }
    if (j.contains("policy")) c.policy = parse_policy(j["policy"].get<std::string>());
    if (j.contains("deviation")) {
      const auto d = j["deviation"].get<std::string>();
      if (d == "per-category") c.deviation = DeviationMode::kPerCategory;
      else if (d == "aggregate") c.deviation = DeviationMode::kAggregate;
      else throw DomainError("config: deviation must be 'per-category' or 'aggregate'");
    }
    if (j.contains("adrf_weighting")) {
      const auto w = j["adrf_weighting"].get<std::string>();
      if (w == "neighbor") c.weighting = AdrfWeighting::kNeighborPropensity;
      else if (w == "target") c.weighting = AdrfWeighting::kTargetPropensity;
      else throw DomainError("config: adrf_weighting must be 'neighbor' or 'target'");
    }
    if (j.contains("cutoffs")) c.cutoffs = j["cutoffs"].get<std::vector<int>>();
    c.output_dir = j.value("output", c.output_dir);
    c.eval_split = j.value("eval_split", c.eval_split);
    c.allow_out_of_range = j.value("allow_out_of_range", c.allow_out_of_range);
    c.threads = j.value("threads", c.threads);
  } catch (const nlohmann::json::exception& e) {
    throw DomainError(std::string("config: ") + e.what());
  }
  return c;
}

inline RunConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open config " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw DomainError("config " + path.string() + ": " + e.what());
  }
  return config_from_json(j);
}

// ---------------------------------------------------------------------------
// Stage artifacts

// Training data re-indexed to dense ids plus everything derived from it.
struct LoadedData {
  DatasetSplit split;
  DenseIds ids;
  std::vector<ItemId> catalog;
  std::optional<CategoryMap> labels;
  PopularityTable popularity;
  std::vector<Trail> trails;
  std::map<UserId, Records> history;
  std::string key;

  std::size_t num_users() const { return ids.users.size(); }
  const Records& eval_records(const std::string& split_name) const {
    return split_name == "valid" ? split.valid : split.test;
  }
};

struct TrainArtifact {
  ModelState model;
  std::size_t num_real_users = 0;
  std::vector<UserId> pseudo_source;  // pseudo user (num_real_users + s) -> source user
};

struct UserEstimate {
  UserId user = 0;
  DiscreteTreatment t0;
  PropensityMatrix P;
  AdrfMatrix A;
  MtefVector mtef;
};

using Recommendations = std::map<UserId, std::vector<ScoredItem>>;

template <typename T>
struct Keyed {
  std::string key;
  std::shared_ptr<const T> value;
};

// Most recent artifact of each stage, shared across runs in one process.
struct ArtifactCache {
  std::optional<Keyed<LoadedData>> data;
  std::optional<Keyed<TrainArtifact>> train;
  std::optional<Keyed<CategoryMap>> cluster;
  std::optional<Keyed<std::vector<AugmentedSample>>> augment;
  std::optional<Keyed<std::vector<UserEstimate>>> estimate;
  std::optional<Keyed<Recommendations>> plan;
};

enum class Stage { kTrain, kCluster, kAugment, kEstimate, kPlan, kEvaluate };

inline std::string to_string(Stage s) {
  switch (s) {
    case Stage::kTrain: return "train";
    case Stage::kCluster: return "cluster";
    case Stage::kAugment: return "augment";
    case Stage::kEstimate: return "estimate";
    case Stage::kPlan: return "plan";
    case Stage::kEvaluate: return "evaluate";
  }
  return "?";
}

enum class RunMode {
  kFresh,       // compute every stage (in-memory cache still applies)
  kResume,      // load matching on-disk artifacts, refuse stale ones
  kStageOnly,   // upstream must load from disk; the target stage is recomputed
};

class StageError : public Error {
 public:
  StageError(std::string stage, const std::string& cause)
      : Error("stage '" + stage + "' failed: " + cause), stage_(std::move(stage)) {}
  const std::string& stage() const noexcept { return stage_; }

 private:
  std::string stage_;
};

class StaleArtifactError : public Error {
 public:
  using Error::Error;
};

struct PipelineResult {
  MetricReport report;
  std::map<std::string, std::string> keys;  // stage -> key
  std::vector<std::string> reused;          // stages served from cache or disk
  std::shared_ptr<const Recommendations> recommendations;
  std::shared_ptr<const std::vector<UserEstimate>> estimates;
  std::shared_ptr<const LoadedData> data;
  std::shared_ptr<const TrainArtifact> train;
  std::shared_ptr<const CategoryMap> categories;
  double seconds = 0.0;
};

namespace detail {

inline std::string file_digest(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return Fnv1a().update(ss.str()).hex();
}

inline Records read_records(const std::string& path, bool has_position) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path);
  try {
    return parse_interactions(in, has_position);
  } catch (const Error& e) {
    throw Error(path + ": " + e.what());
  }
}

template <typename Fn>
void write_file(const fs::path& path, Fn&& fn) {
  fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + tmp.string());
    fn(out);
    if (!out) throw Error("write failed for " + tmp.string());
  }
  fs::rename(tmp, path);
}

inline std::ifstream open_in(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  return in;
}

inline std::string dbl(double v) { return format_double(v); }

}  // namespace detail

// Builds LoadedData from in-memory records (original ids). `labels` uses
// original item ids. `key` should identify the data content.
inline LoadedData prepare_data(DatasetSplit split, std::optional<CategoryMap> labels,
                               std::string key) {
  LoadedData d;
  std::vector<ItemId> extra;
  if (labels) {
    for (const auto& [item, c] : labels->assignment) extra.push_back(item);
  }
  d.ids = reindex(split, extra);
  d.split = std::move(split);
  d.catalog.resize(d.ids.items.size());
  std::iota(d.catalog.begin(), d.catalog.end(), ItemId{0});
  if (labels) {
    CategoryMap dense;
    dense.num_categories = labels->num_categories;
    dense.labels = labels->labels;
    for (const auto& [item, c] : labels->assignment) dense.assignment[d.ids.items.to_dense(item)] = c;
    dense.require_total(d.catalog);
    d.labels = std::move(dense);
  }
  d.popularity = build_popularity(d.split.train, d.catalog);
  d.trails = group_trails(d.split.train);
  for (const auto& r : d.split.train) d.history[r.user].push_back(r);
  d.key = std::move(key);
  return d;
}

inline LoadedData load_data(const DataConfig& cfg, std::uint64_t seed) {
  if (cfg.train.empty()) throw DomainError("data.train is required");
  Fnv1a h;
  h.field("train", detail::file_digest(cfg.train)).field("pos", cfg.has_position ? "1" : "0");
  DatasetSplit split;
  split.train = detail::read_records(cfg.train, cfg.has_position);
  if (!cfg.valid.empty() && !cfg.test.empty()) {
    split.valid = detail::read_records(cfg.valid, cfg.has_position);
    split.test = detail::read_records(cfg.test, cfg.has_position);
    h.field("valid", detail::file_digest(cfg.valid)).field("test", detail::file_digest(cfg.test));
  } else if (!cfg.unbiased.empty()) {
    auto unbiased = detail::read_records(cfg.unbiased, cfg.has_position);
    auto [valid, test] = split_unbiased(unbiased, cfg.valid_ratio, seed);
    split.valid = std::move(valid);
    split.test = std::move(test);
    h.field("unbiased", detail::file_digest(cfg.unbiased))
        .field("ratio", detail::dbl(cfg.valid_ratio))
        .field("seed", std::to_string(seed));
  } else {
    throw DomainError("data needs either valid+test or unbiased");
  }
  std::optional<CategoryMap> labels;
  if (!cfg.categories.empty()) {
    auto in = detail::open_in(cfg.categories);
    labels = load_categories(in);
    h.field("categories", detail::file_digest(cfg.categories));
  }
  return prepare_data(std::move(split), std::move(labels), h.hex());
}

// Runs the pipeline for one config.
class Pipeline {
 public:
  explicit Pipeline(std::shared_ptr<ArtifactCache> cache = std::make_shared<ArtifactCache>())
      : cache_(std::move(cache)) {}

  // `preloaded` bypasses file loading (synthetic or test data).
  PipelineResult run(const RunConfig& cfg, Stage until = Stage::kEvaluate,
                     RunMode mode = RunMode::kFresh,
                     std::shared_ptr<const LoadedData> preloaded = nullptr) {
    cfg.validate();
    const auto start = std::chrono::steady_clock::now();
    PipelineResult res;
    cfg_ = &cfg;
    mode_ = mode;
    until_ = until;
    persist_ = !cfg.output_dir.empty();
    result_ = &res;

    res.data = stage_data(preloaded);
    if (persist_) {
      detail::write_file(fs::path(cfg.output_dir) / "config.json",
                         [&](std::ostream& o) { o << config_to_json(cfg).dump(2) << '\n'; });
      detail::write_file(fs::path(cfg.output_dir) / "idmap.tsv",
                         [&](std::ostream& o) { write_id_map(o, res.data->ids); });
    }
    res.train = stage_train(*res.data);
    const bool causal = cfg.policy == Policy::kMtef || cfg.policy == Policy::kAdrf;
    if (until != Stage::kTrain && (causal || until < Stage::kPlan)) {
      res.categories = stage_cluster(*res.data, *res.train);
      if (until != Stage::kCluster) {
        auto samples = stage_augment(*res.data, *res.categories);
        if (until != Stage::kAugment) {
          res.estimates = stage_estimate(*res.data, *res.train, *res.categories, *samples);
        }
      }
    }
    if (until >= Stage::kPlan) {
      res.recommendations = stage_plan(*res.data, *res.train, res.categories.get(), res.estimates.get());
    }
    if (until >= Stage::kEvaluate) res.report = stage_evaluate(*res.data, *res.recommendations);
    res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    result_ = nullptr;
    return res;
  }

  const ArtifactCache& cache() const { return *cache_; }

 private:
  // Decides where a stage's artifact comes from. Returns the artifact when
  // it can be reused (memory or disk), or nullptr when it must be computed.
  template <typename T, typename Loader>
  std::shared_ptr<const T> reuse(Stage stage, const std::string& key,
                                 std::optional<Keyed<T>>& slot, Loader&& load) {
    const std::string name = to_string(stage);
    result_->keys[name] = key;
    const bool is_target = mode_ == RunMode::kStageOnly && stage == until_;
    const fs::path dir = fs::path(cfg_->output_dir) / name;
    const bool on_disk = persist_ && fs::exists(dir / "key");
    std::string disk_key;
    if (on_disk) {
      auto in = detail::open_in(dir / "key");
      std::getline(in, disk_key);
    }
    if (mode_ != RunMode::kFresh && !is_target) {
      if (on_disk && disk_key == key) {
        if (slot && slot->key == key) {
          result_->reused.push_back(name);
          return slot->value;
        }
        try {
          auto value = std::make_shared<const T>(load(dir));
          slot = Keyed<T>{key, value};
          result_->reused.push_back(name);
          return value;
        } catch (const std::exception& e) {
          throw StageError(name, std::string("cannot resume: ") + e.what());
        }
      }
      if (on_disk) {
        throw StaleArtifactError("stage '" + name + "': artifact in " + dir.string() +
                                 " was built from a different config (key " + disk_key +
                                 ", expected " + key + "); refusing to resume");
      }
      if (mode_ == RunMode::kStageOnly) {
        throw StageError(name, "no artifact in " + dir.string() + "; run `" + name + "` first");
      }
    }
    if (!is_target && slot && slot->key == key) {
      result_->reused.push_back(name);
      if (persist_ && disk_key != key) pending_write_ = true;
      return slot->value;
    }
    pending_write_ = true;
    return nullptr;
  }

  template <typename T, typename Fn>
  std::shared_ptr<const T> compute(Stage stage, const std::string& key,
                                   std::optional<Keyed<T>>& slot, Fn&& fn) {
    try {
      auto value = std::make_shared<const T>(fn());
      slot = Keyed<T>{key, value};
      return value;
    } catch (const StageError&) {
      throw;
    } catch (const std::exception& e) {
      throw StageError(to_string(stage), e.what());
    }
  }

  void persist(Stage stage, const std::string& key,
               const std::function<void(const fs::path&)>& write) {
    if (!persist_ || !pending_write_) return;
    pending_write_ = false;
    const fs::path dir = fs::path(cfg_->output_dir) / to_string(stage);
    fs::create_directories(dir);
    fs::remove(dir / "key");
    write(dir);
    detail::write_file(dir / "key", [&](std::ostream& o) { o << key << '\n'; });
  }

  // -- stages ---------------------------------------------------------------

  std::shared_ptr<const LoadedData> stage_data(std::shared_ptr<const LoadedData> preloaded) {
    if (preloaded) {
      cache_->data = Keyed<LoadedData>{preloaded->key, preloaded};
      return preloaded;
    }
    try {
      auto loaded = std::make_shared<const LoadedData>(load_data(cfg_->data, cfg_->seed));
      if (cache_->data && cache_->data->key == loaded->key) return cache_->data->value;
      cache_->data = Keyed<LoadedData>{loaded->key, loaded};
      return loaded;
    } catch (const std::exception& e) {
      throw StageError("load", e.what());
    }
  }

  std::string train_key(const LoadedData& d) const {
    const auto& t = cfg_->train;
    return Fnv1a()
        .field("data", d.key)
        .field("lambda", detail::dbl(cfg_->hp.lambda))
        .field("d", std::to_string(t.dim))
        .field("neg", std::to_string(t.neg_ratio))
        .field("lr", detail::dbl(t.learning_rate))
        .field("epochs", std::to_string(t.epochs))
        .field("l2", detail::dbl(t.l2))
        .field("init", detail::dbl(t.init_scale))
        .field("seed", std::to_string(t.seed))
        .field("loss", t.loss == LossKind::kPointwiseBce ? "bce" : "bpr")
        .hex();
  }

  // Real users keep their dense ids; each eligible trail's history becomes a
  // pseudo user numbered after them, trained jointly in one model.
  std::shared_ptr<const TrainArtifact> stage_train(const LoadedData& d) {
    const auto key = train_key(d);
    auto load = [&](const fs::path& dir) {
      TrainArtifact a;
      auto in = detail::open_in(dir / "model.txt");
      a.model = load_model(in);
      auto pin = detail::open_in(dir / "pseudo_users.tsv");
      std::string line;
      std::getline(pin, line);
      if (!parse_int(trim(line), a.num_real_users)) throw Error("bad pseudo_users.tsv header");
      while (std::getline(pin, line)) {
        if (line.empty()) continue;
        auto f = split_fields(line, '\t');
        UserId src = 0;
        if (f.size() != 2 || !parse_int(f[1], src)) throw Error("bad pseudo_users.tsv row");
        a.pseudo_source.push_back(src);
      }
      return a;
    };
    auto value = reuse(Stage::kTrain, key, cache_->train, load);
    if (!value) {
      value = compute(Stage::kTrain, key, cache_->train, [&] {
        TrainArtifact a;
        a.num_real_users = d.num_users();
        Records corpus = d.split.train;
        std::vector<UserId> users(d.num_users());
        std::iota(users.begin(), users.end(), UserId{0});
        for (const auto& trail : d.trails) {
          auto parts = split_trail(trail.records, cfg_->hp.lambda);
          if (!parts) continue;
          const UserId pseudo = static_cast<UserId>(a.num_real_users + a.pseudo_source.size());
          a.pseudo_source.push_back(trail.user);
          users.push_back(pseudo);
          for (auto r : parts->history) {
            r.user = pseudo;
            corpus.push_back(r);
          }
        }
        a.model = train_mf(corpus, d.catalog, cfg_->train, users);
        return a;
      });
    }
    persist(Stage::kTrain, key, [&](const fs::path& dir) {
      detail::write_file(dir / "model.txt", [&](std::ostream& o) { save_model(o, value->model); });
      detail::write_file(dir / "embeddings.tsv", [&](std::ostream& o) { export_embeddings(o, value->model); });
      detail::write_file(dir / "pseudo_users.tsv", [&](std::ostream& o) {
        o << value->num_real_users << '\n';
        for (std::size_t s = 0; s < value->pseudo_source.size(); ++s) {
          o << value->num_real_users + s << '\t' << value->pseudo_source[s] << '\n';
        }
      });
    });
    return value;
  }

  std::shared_ptr<const CategoryMap> stage_cluster(const LoadedData& d, const TrainArtifact& t) {
    const auto key = Fnv1a()
                         .field("train", result_->keys.at("train"))
                         .field("C", std::to_string(cfg_->hp.C))
                         .field("seed", std::to_string(cfg_->seed))
                         .hex();
    auto load = [&](const fs::path& dir) {
      auto in = detail::open_in(dir / "categories.tsv");
      CategoryMap m = load_categories(in);
      // Stored indices are already dense; keep them verbatim.
      CategoryMap exact;
      exact.num_categories = cfg_->hp.C;
      for (const auto& [item, c] : m.assignment) {
        int idx = 0;
        if (!parse_int(m.labels[static_cast<std::size_t>(c)], idx)) throw Error("bad category index");
        exact.assignment[item] = idx;
      }
      exact.require_total(d.catalog);
      return exact;
    };
    auto value = reuse(Stage::kCluster, key, cache_->cluster, load);
    if (!value) {
      value = compute(Stage::kCluster, key, cache_->cluster, [&] {
        CategoryMap m = cluster_items(t.model, cfg_->hp.C, cfg_->seed);
        m.require_total(d.catalog);
        return m;
      });
    }
    persist(Stage::kCluster, key, [&](const fs::path& dir) {
      detail::write_file(dir / "categories.tsv", [&](std::ostream& o) { write_categories(o, *value); });
    });
    return value;
  }

  std::shared_ptr<const std::vector<AugmentedSample>> stage_augment(const LoadedData& d,
                                                                    const CategoryMap& cats) {
    const auto key = Fnv1a()
                         .field("cluster", result_->keys.at("cluster"))
                         .field("lambda", detail::dbl(cfg_->hp.lambda))
                         .hex();
    auto load = [&](const fs::path& dir) {
      auto in = detail::open_in(dir / "augmented.tsv");
      return read_augmented(in);
    };
    auto value = reuse(Stage::kAugment, key, cache_->augment, load);
    if (!value) {
      value = compute(Stage::kAugment, key, cache_->augment, [&] {
        return build_augmented_dataset(d.trails, cfg_->hp.lambda, cats);
      });
    }
    persist(Stage::kAugment, key, [&](const fs::path& dir) {
      detail::write_file(dir / "augmented.tsv", [&](std::ostream& o) { write_augmented(o, *value); });
    });
    return value;
  }

  // Users that get recommendations: everyone in the validation or test part.
  static std::vector<UserId> target_users(const LoadedData& d) {
    std::set<UserId> users;
    for (const auto& r : d.split.valid) users.insert(r.user);
    for (const auto& r : d.split.test) users.insert(r.user);
    return {users.begin(), users.end()};
  }

  std::vector<ScoredItem> ranking_for(const LoadedData& d, const ModelState& model, UserId user) const {
    static const Records kNone;
    auto it = d.history.find(user);
    const auto cands = candidate_pool(d.catalog, it == d.history.end() ? kNone : it->second);
    if (cands.size() < static_cast<std::size_t>(cfg_->hp.N)) {
      throw DomainError("user " + std::to_string(d.ids.users.to_original(user)) + " has only " +
                        std::to_string(cands.size()) + " candidates for N=" +
                        std::to_string(cfg_->hp.N));
    }
    return rank_candidates(model, user, cands);
  }

  std::shared_ptr<const std::vector<UserEstimate>> stage_estimate(
      const LoadedData& d, const TrainArtifact& t, const CategoryMap& cats,
      const std::vector<AugmentedSample>& samples) {
    const auto& hp = cfg_->hp;
    const auto key = Fnv1a()
                         .field("augment", result_->keys.at("augment"))
                         .field("K", std::to_string(hp.K))
                         .field("K_p", std::to_string(hp.K_p))
                         .field("K_s", std::to_string(hp.K_s))
                         .field("gamma", detail::dbl(hp.gamma))
                         .field("v_p", detail::dbl(hp.v_p))
                         .field("v_a", detail::dbl(hp.v_a))
                         .field("v_m", detail::dbl(hp.v_m))
                         .field("delta_t", std::to_string(hp.delta_t))
                         .field("N", std::to_string(hp.N))
                         .field("weighting", cfg_->weighting == AdrfWeighting::kNeighborPropensity ? "n" : "t")
                         .hex();
    auto value = reuse(Stage::kEstimate, key, cache_->estimate,
                       [&](const fs::path& dir) { return read_estimates(dir / "matrices.tsv"); });
    if (!value) {
      value = compute(Stage::kEstimate, key, cache_->estimate,
                      [&] { return estimate_all(d, t, cats, samples); });
    }
    persist(Stage::kEstimate, key, [&](const fs::path& dir) {
      detail::write_file(dir / "matrices.tsv", [&](std::ostream& o) { write_estimates(o, *value, d); });
    });
    return value;
  }

  std::vector<UserEstimate> estimate_all(const LoadedData& d, const TrainArtifact& t,
                                         const CategoryMap& cats,
                                         const std::vector<AugmentedSample>& samples) const {
    const auto& hp = cfg_->hp;
    if (samples.size() != t.pseudo_source.size()) {
      throw Error("augmented set does not match the trained pseudo users");
    }
    if (!cfg_->allow_out_of_range &&
        (static_cast<std::size_t>(hp.K_p) > samples.size() ||
         static_cast<std::size_t>(hp.K_s) > samples.size())) {
      throw DomainError("K_p and K_s must not exceed the " + std::to_string(samples.size()) +
                        " augmented samples");
    }
    std::vector<Vector> pseudo(samples.size());
    std::vector<DiscreteTreatment> slots(samples.size());
    for (std::size_t s = 0; s < samples.size(); ++s) {
      pseudo[s] = t.model.user(static_cast<UserId>(t.num_real_users + s));
      slots[s] = discretize(samples[s].treatment, hp.K);
    }
    const CosineIndex index(pseudo);
    const auto C = cats.num_categories;

    auto propensity_around = [&](std::span<const double> query, UserId exclude_source) {
      auto nb = index.query(query, static_cast<std::size_t>(hp.K_p),
                            [&](std::size_t s) { return samples[s].source_user != exclude_source; });
      return estimate_propensity(nb | std::views::transform([&](const Neighbor& n) -> const DiscreteTreatment& {
                                   return slots[n.index];
                                 }),
                                 C, hp.K, hp.v_p);
    };

    std::vector<PropensityMatrix> sample_propensity;
    if (cfg_->weighting == AdrfWeighting::kNeighborPropensity) {
      sample_propensity.resize(samples.size());
      parallel_for(samples.size(), [&](std::size_t s) {
        sample_propensity[s] = propensity_around(pseudo[s], samples[s].source_user);
      }, cfg_->threads);
    }

    const auto users = target_users(d);
    std::vector<UserEstimate> out(users.size());
    parallel_for(users.size(), [&](std::size_t idx) {
      const UserId u = users[idx];
      UserEstimate e;
      e.user = u;
      const auto ranking = ranking_for(d, t.model, u);
      TreatmentVector t0;
      t0.ratios.assign(static_cast<std::size_t>(C), 0.0);
      for (int r = 0; r < hp.N; ++r) {
        t0.ratios[static_cast<std::size_t>(cats.at(ranking[static_cast<std::size_t>(r)].item))] += 1.0 / hp.N;
      }
      e.t0 = discretize(t0, hp.K);
      const Vector& q = t.model.user(u);
      e.P = propensity_around(q, u);
      auto nb = index.query(q, static_cast<std::size_t>(hp.K_s),
                            [&](std::size_t s) { return samples[s].source_user != u; });
      auto neighbors = nb | std::views::transform([&](const Neighbor& n) -> const AugmentedSample& {
                         return samples[n.index];
                       });
      if (cfg_->weighting == AdrfWeighting::kNeighborPropensity) {
        e.A = estimate_adrf_weighted(
            neighbors,
            [&](const AugmentedSample& s) -> const PropensityMatrix& { return sample_propensity[s.sample_id]; },
            hp.gamma, hp.v_a, C, hp.K);
      } else {
        e.A = estimate_adrf(neighbors, e.P, hp.gamma, hp.v_a, C, hp.K);
      }
      e.mtef = compute_mtef(e.A, e.t0, hp.delta_t, hp.v_m);
      out[idx] = std::move(e);
    }, cfg_->threads);
    return out;
  }

  // Per user: `user T slots..`, `user P c ..`, `user R c ..` (unclamped),
  // `user A c ..`, `user F c ..` (filled flags), `user M m..`, `user MF flags..`.
  void write_estimates(std::ostream& o, const std::vector<UserEstimate>& est, const LoadedData& d) const {
    o << "#user_original\tuser\tkind\trow\tvalues...\n";
    for (const auto& e : est) {
      const auto orig = d.ids.users.to_original(e.user);
      auto head = [&](const char* kind) { o << orig << '\t' << e.user << '\t' << kind; };
      head("T");
      o << "\t-";
      for (int s : e.t0.slots) o << '\t' << s;
      o << '\n';
      for (std::size_t c = 0; c < e.A.categories(); ++c) {
        head("P");
        o << '\t' << c;
        for (double v : e.P.p.row(c)) o << '\t' << detail::dbl(v);
        o << '\n';
        head("R");
        o << '\t' << c;
        for (double v : e.P.raw.row(c)) o << '\t' << detail::dbl(v);
        o << '\n';
        head("A");
        o << '\t' << c;
        for (double v : e.A.value.row(c)) o << '\t' << detail::dbl(v);
        o << '\n';
        head("F");
        o << '\t' << c;
        for (char v : e.A.filled.row(c)) o << '\t' << int(v);
        o << '\n';
      }
      head("M");
      o << "\t-";
      for (double v : e.mtef.m) o << '\t' << detail::dbl(v);
      o << '\n';
      head("MF");
      o << "\t-";
      for (char v : e.mtef.filled) o << '\t' << int(v);
      o << '\n';
    }
  }

  std::vector<UserEstimate> read_estimates(const fs::path& path) const {
    const auto& hp = cfg_->hp;
    const auto nc = static_cast<std::size_t>(hp.C), nk = static_cast<std::size_t>(hp.K) + 1;
    auto in = detail::open_in(path);
    std::vector<UserEstimate> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty() || line[0] == '#') continue;
      auto f = split_fields(line, '\t');
      if (f.size() < 4) throw ParseError(lineno, "short matrices row");
      UserId u = 0;
      if (!parse_int(f[1], u)) throw ParseError(lineno, "bad user");
      const std::string_view kind = f[2];
      if (kind == "T") {
        UserEstimate e;
        e.user = u;
        e.t0.K = hp.K;
        for (std::size_t i = 4; i < f.size(); ++i) {
          int s = 0;
          if (!parse_int(f[i], s)) throw ParseError(lineno, "bad slot");
          e.t0.slots.push_back(s);
        }
        e.P.floor_value = hp.v_p;
        e.P.p = Grid<double>(nc, nk);
        e.P.raw = Grid<double>(nc, nk);
        e.A.null_value = hp.v_a;
        e.A.value = Grid<double>(nc, nk);
        e.A.filled = Grid<char>(nc, nk);
        e.mtef.null_value = hp.v_m;
        e.mtef.delta = hp.delta_t;
        out.push_back(std::move(e));
        continue;
      }
      if (out.empty() || out.back().user != u) throw ParseError(lineno, "row before its T line");
      auto& e = out.back();
      std::vector<double> vals;
      for (std::size_t i = 4; i < f.size(); ++i) {
        double v = 0;
        if (!parse_double(f[i], v)) throw ParseError(lineno, "bad value");
        vals.push_back(v);
      }
      if (kind == "M" || kind == "MF") {
        if (vals.size() != nc) throw ParseError(lineno, "bad MTEF width");
        if (kind == "M") e.mtef.m = vals;
        else for (double v : vals) e.mtef.filled.push_back(static_cast<char>(v != 0));
        continue;
      }
      std::size_t c = 0;
      if (!parse_int(f[3], c) || c >= nc || vals.size() != nk) throw ParseError(lineno, "bad grid row");
      for (std::size_t k = 0; k < nk; ++k) {
        if (kind == "P") e.P.p(c, k) = vals[k];
        else if (kind == "R") e.P.raw(c, k) = vals[k];
        else if (kind == "A") e.A.value(c, k) = vals[k];
        else if (kind == "F") e.A.filled(c, k) = static_cast<char>(vals[k] != 0);
        else throw ParseError(lineno, "unknown row kind");
      }
    }
    return out;
  }

  std::shared_ptr<const Recommendations> stage_plan(const LoadedData& d, const TrainArtifact& t,
                                                    const CategoryMap* cats,
                                                    const std::vector<UserEstimate>* est) {
    const auto& hp = cfg_->hp;
    Fnv1a h;
    h.field("policy", to_string(cfg_->policy)).field("N", std::to_string(hp.N));
    switch (cfg_->policy) {
      case Policy::kRandom:
        h.field("train", result_->keys.at("train")).field("seed", std::to_string(cfg_->seed));
        break;
      case Policy::kBackend:
        h.field("train", result_->keys.at("train"));
        break;
      case Policy::kMtef:
        h.field("estimate", result_->keys.at("estimate")).field("alpha", detail::dbl(hp.alpha));
        break;
      case Policy::kAdrf:
        h.field("estimate", result_->keys.at("estimate"))
            .field("epsilon", std::to_string(hp.epsilon))
            .field("deviation", cfg_->deviation == DeviationMode::kPerCategory ? "pc" : "agg");
        break;
    }
    const auto key = h.hex();
    auto value = reuse(Stage::kPlan, key, cache_->plan,
                       [&](const fs::path& dir) { return read_recommendations(dir / "recommendations.tsv", d); });
    if (!value) {
      value = compute(Stage::kPlan, key, cache_->plan, [&] { return plan_all(d, t, cats, est); });
    }
    persist(Stage::kPlan, key, [&](const fs::path& dir) {
      detail::write_file(dir / "recommendations.tsv",
                         [&](std::ostream& o) { write_recommendations(o, *value, d); });
    });
    return value;
  }

  Recommendations plan_all(const LoadedData& d, const TrainArtifact& t, const CategoryMap* cats,
                           const std::vector<UserEstimate>* est) const {
    const auto& hp = cfg_->hp;
    std::vector<UserId> users;
    if (est) {
      for (const auto& e : *est) users.push_back(e.user);
    } else {
      users = target_users(d);
    }
    std::vector<std::vector<ScoredItem>> lists(users.size());
    parallel_for(users.size(), [&](std::size_t idx) {
      const UserId u = users[idx];
      auto ranking = ranking_for(d, t.model, u);
      switch (cfg_->policy) {
        case Policy::kRandom: {
          std::mt19937_64 rng(Fnv1a().field("seed", std::to_string(cfg_->seed))
                                  .field("user", std::to_string(u)).digest());
          std::shuffle(ranking.begin(), ranking.end(), rng);
          ranking.resize(static_cast<std::size_t>(hp.N));
          lists[idx] = std::move(ranking);
          break;
        }
        case Policy::kBackend:
          ranking.resize(static_cast<std::size_t>(hp.N));
          lists[idx] = std::move(ranking);
          break;
        case Policy::kMtef:
          lists[idx] = rerank_mtef(ranking, (*est)[idx].mtef, hp.alpha, *cats, hp.N);
          break;
        case Policy::kAdrf: {
          const auto plan = best_treatment((*est)[idx].A, (*est)[idx].t0, hp.epsilon, hp.K, cfg_->deviation);
          lists[idx] = allocate_list(ranking, *cats, plan.slots, hp.N, hp.K);
          break;
        }
      }
    }, cfg_->threads);
    Recommendations out;
    for (std::size_t i = 0; i < users.size(); ++i) out[users[i]] = std::move(lists[i]);
    return out;
  }

  static void write_recommendations(std::ostream& o, const Recommendations& recs, const LoadedData& d) {
    for (const auto& [user, list] : recs) {
      for (std::size_t r = 0; r < list.size(); ++r) {
        o << d.ids.users.to_original(user) << '\t' << d.ids.items.to_original(list[r].item) << '\t'
          << r + 1 << '\t' << detail::dbl(list[r].score) << '\n';
      }
    }
  }

  static Recommendations read_recommendations(const fs::path& path, const LoadedData& d) {
    auto in = detail::open_in(path);
    Recommendations out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty()) continue;
      auto f = split_fields(line, '\t');
      UserId u = 0;
      ItemId i = 0;
      std::size_t rank = 0;
      double s = 0;
      if (f.size() != 4 || !parse_int(f[0], u) || !parse_int(f[1], i) || !parse_int(f[2], rank) ||
          !parse_double(f[3], s)) {
        throw ParseError(lineno, "bad recommendation row");
      }
      auto& list = out[d.ids.users.to_dense(u)];
      if (rank != list.size() + 1) throw ParseError(lineno, "ranks out of order");
      list.push_back({d.ids.items.to_dense(i), s});
    }
    return out;
  }

  MetricReport stage_evaluate(const LoadedData& d, const Recommendations& recs) {
    const auto& split = d.eval_records(cfg_->eval_split);
    std::set<UserId> in_split;
    for (const auto& r : split) in_split.insert(r.user);
    std::map<UserId, std::vector<ItemId>> lists;
    for (const auto& [u, list] : recs) {
      if (!in_split.count(u)) continue;
      auto& items = lists[u];
      for (const auto& s : list) items.push_back(s.item);
    }
    MetricReport report;
    try {
      report = evaluate_run(lists, split, d.split.train, d.labels ? &*d.labels : nullptr,
                            d.popularity, cfg_->cutoffs);
    } catch (const std::exception& e) {
      throw StageError("evaluate", e.what());
    }
    if (persist_) {
      const fs::path dir = fs::path(cfg_->output_dir) / "evaluate";
      detail::write_file(dir / "report.txt", [&](std::ostream& o) { write_report_table(o, report); });
      detail::write_file(dir / "report.kv", [&](std::ostream& o) {
        o << "split = " << cfg_->eval_split << '\n';
        write_report_kv(o, report);
      });
      detail::write_file(dir / "per_user.tsv", [&](std::ostream& o) {
        for (const auto& [u, metrics] : report.per_user)
          for (const auto& [m, cuts] : metrics)
            for (const auto& [k, v] : cuts)
              o << d.ids.users.to_original(u) << '\t' << m << '\t' << k << '\t' << detail::dbl(v) << '\n';
      });
    }
    return report;
  }

  std::shared_ptr<ArtifactCache> cache_;
  const RunConfig* cfg_ = nullptr;
  RunMode mode_ = RunMode::kFresh;
  Stage until_ = Stage::kEvaluate;
  bool persist_ = true;
  bool pending_write_ = false;
  PipelineResult* result_ = nullptr;
};

inline PipelineResult run_pipeline(const RunConfig& cfg, RunMode mode = RunMode::kFresh) {
  Pipeline p;
  return p.run(cfg, Stage::kEvaluate, mode);
}

// ---------------------------------------------------------------------------
// Single-axis sweeps

inline const std::vector<std::string>& sweepable_parameters() {
  static const std::vector<std::string> names{"lambda", "C",     "K",   "K_p",   "K_s",
                                              "gamma",  "epsilon", "v_p", "v_a",  "v_m",
                                              "alpha",  "delta_t", "N",   "neg_ratio", "d"};
  return names;
}

inline void set_parameter(RunConfig& cfg, const std::string& name, double v) {
  auto as_int = [&] {
    if (v != std::floor(v)) throw DomainError("sweep: " + name + " needs integer values");
    return static_cast<int>(v);
  };
  if (name == "lambda") cfg.hp.lambda = v;
  else if (name == "C") cfg.hp.C = as_int();
  else if (name == "K") cfg.hp.K = as_int();
  else if (name == "K_p") cfg.hp.K_p = as_int();
  else if (name == "K_s") cfg.hp.K_s = as_int();
  else if (name == "gamma") cfg.hp.gamma = v;
  else if (name == "epsilon") cfg.hp.epsilon = as_int();
  else if (name == "v_p") cfg.hp.v_p = v;
  else if (name == "v_a") cfg.hp.v_a = v;
  else if (name == "v_m") cfg.hp.v_m = v;
  else if (name == "alpha") cfg.hp.alpha = v;
  else if (name == "delta_t") cfg.hp.delta_t = as_int();
  else if (name == "N") cfg.hp.N = as_int();
  else if (name == "neg_ratio") cfg.train.neg_ratio = as_int();
  else if (name == "d") cfg.train.dim = as_int();
  else throw DomainError("sweep: unknown parameter '" + name + "'");
}

struct SweepPoint {
  double value = 0.0;
  MetricReport report;
  std::vector<std::string> reused;
  double seconds = 0.0;
};

// One run per grid value, each persisted under <output>/sweep-<name>/<i>/.
// Stages whose key does not depend on the swept parameter are shared.
inline std::vector<SweepPoint> sweep(const RunConfig& base, const std::string& name,
                                     std::span<const double> grid,
                                     std::shared_ptr<const LoadedData> preloaded = nullptr) {
  if (grid.empty()) throw DomainError("sweep: empty grid");
  Pipeline pipeline;
  std::vector<SweepPoint> out;
  for (std::size_t i = 0; i < grid.size(); ++i) {
    RunConfig cfg = base;
    set_parameter(cfg, name, grid[i]);
    if (!base.output_dir.empty()) {
      cfg.output_dir = (fs::path(base.output_dir) / ("sweep-" + name) / std::to_string(i)).string();
    }
    auto res = pipeline.run(cfg, Stage::kEvaluate, RunMode::kFresh, preloaded);
    out.push_back({grid[i], std::move(res.report), std::move(res.reused), res.seconds});
  }
  return out;
}

inline void write_sweep_table(std::ostream& o, const std::string& name,
                              std::span<const SweepPoint> points, std::span<const int> cutoffs) {
  o << name;
  for (const auto& m : metric_names())
    for (int c : cutoffs) o << '\t' << m << '@' << c;
  o << "\tseconds\n";
  for (const auto& p : points) {
    o << format_double(p.value);
    for (const auto& m : metric_names())
      for (int c : cutoffs) {
        auto v = p.report.value.find(m);
        if (v == p.report.value.end() || !v->second.count(c)) {
          o << "\t-";
          continue;
        }
        std::ostringstream cell;
        cell << std::fixed << std::setprecision(4) << v->second.at(c);
        o << '\t' << cell.str();
      }
    std::ostringstream secs;
    secs << std::fixed << std::setprecision(3) << p.seconds;
    o << '\t' << secs.str() << '\n';
  }
}

}  // namespace upliftrec
