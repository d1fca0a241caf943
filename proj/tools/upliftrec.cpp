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
// Command-line front end. Every stage subcommand reads a JSON config
// (--config) and lets flags override individual values.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "upliftrec/upliftrec.hpp"

namespace fs = std::filesystem;
using namespace upliftrec;

namespace {

struct Overrides {
  std::string config;
  std::optional<std::string> train_data, valid, test, unbiased, categories, output, policy,
      deviation, weighting, eval_split, loss;
  std::optional<bool> has_position;
  std::optional<double> valid_ratio, lambda, gamma, v_p, v_a, v_m, alpha, lr, l2;
  std::optional<int> C, K, K_p, K_s, epsilon, delta_t, N, d, neg_ratio, epochs;
  std::optional<std::uint64_t> seed;
  std::optional<unsigned> threads;
  std::vector<int> cutoffs;
  bool allow_out_of_range = false;
  bool resume = false;

  void attach(CLI::App* app) {
    app->add_option("-c,--config", config, "JSON config file");
    app->add_option("--train-data", train_data, "training interactions");
    app->add_option("--valid", valid, "validation interactions");
    app->add_option("--test", test, "test interactions");
    app->add_option("--unbiased", unbiased, "randomized interactions split into valid/test");
    app->add_option("--categories", categories, "item category labels (for RUE)");
    app->add_option("--has-position", has_position, "interaction files carry a position column");
    app->add_option("--valid-ratio", valid_ratio);
    app->add_option("-o,--output", output, "artifact directory");
    app->add_option("--policy", policy, "random|backend|mtef|adrf");
    app->add_option("--deviation", deviation, "per-category|aggregate");
    app->add_option("--adrf-weighting", weighting, "neighbor|target");
    app->add_option("--eval-split", eval_split, "test|valid");
    app->add_option("--lambda", lambda);
    app->add_option("--C", C);
    app->add_option("--K", K);
    app->add_option("--K_p", K_p);
    app->add_option("--K_s", K_s);
    app->add_option("--gamma", gamma);
    app->add_option("--epsilon", epsilon);
    app->add_option("--v_p", v_p);
    app->add_option("--v_a", v_a);
    app->add_option("--v_m", v_m);
    app->add_option("--alpha", alpha);
    app->add_option("--delta-t", delta_t);
    app->add_option("--N", N);
    app->add_option("--d", d, "embedding dimension");
    app->add_option("--neg-ratio", neg_ratio);
    app->add_option("--epochs", epochs);
    app->add_option("--lr", lr);
    app->add_option("--l2", l2);
    app->add_option("--loss", loss, "bce|bpr");
    app->add_option("--seed", seed);
    app->add_option("--threads", threads, "worker threads (0 = hardware)");
    app->add_option("--cutoffs", cutoffs, "metric cutoffs")->delimiter(',');
    app->add_flag("--allow-out-of-range", allow_out_of_range,
                  "accept hyperparameters outside their recommended ranges");
    app->add_flag("--resume", resume, "reuse matching artifacts from a previous run");
  }

  RunConfig build() const {
    RunConfig c = config.empty() ? RunConfig{} : load_config(config);
    nlohmann::json j = config_to_json(c);
    auto set = [&](const char* key, const auto& v) {
      if (v) j[key] = *v;
    };
    auto set_in = [&](const char* obj, const char* key, const auto& v) {
      if (v) j[obj][key] = *v;
    };
    set_in("data", "train", train_data);
    set_in("data", "valid", valid);
    set_in("data", "test", test);
    set_in("data", "unbiased", unbiased);
    set_in("data", "categories", categories);
    set_in("data", "has_position", has_position);
    set_in("data", "valid_ratio", valid_ratio);
    set("output", output);
    set("policy", policy);
    set("deviation", deviation);
    set("adrf_weighting", weighting);
    set("eval_split", eval_split);
    set("lambda", lambda);
    set("C", C);
    set("K", K);
    set("K_p", K_p);
    set("K_s", K_s);
    set("gamma", gamma);
    set("epsilon", epsilon);
    set("v_p", v_p);
    set("v_a", v_a);
    set("v_m", v_m);
    set("alpha", alpha);
    set("delta_t", delta_t);
    set("N", N);
    set("threads", threads);
    set_in("train", "d", d);
    set_in("train", "neg_ratio", neg_ratio);
    set_in("train", "epochs", epochs);
    set_in("train", "learning_rate", lr);
    set_in("train", "l2", l2);
    set_in("train", "loss", loss);
    if (seed) {
      j["seed"] = *seed;
      j["train"]["seed"] = *seed;
    }
    if (!cutoffs.empty()) j["cutoffs"] = cutoffs;
    if (allow_out_of_range) j["allow_out_of_range"] = true;
    return config_from_json(j);
  }
};

void print_result(const PipelineResult& r, const RunConfig& cfg, Stage until) {
  for (const auto& s : r.reused) std::cerr << "reused " << s << '\n';
  if (until == Stage::kEvaluate) {
    write_report_table(std::cout, r.report);
  } else {
    std::cout << "stage " << to_string(until) << " written to "
              << (fs::path(cfg.output_dir) / to_string(until)).string() << '\n';
  }
}

std::vector<double> parse_grid(const std::string& text) {
  std::vector<double> out;
  for (auto f : split_fields(text, ',')) {
    double v = 0;
    if (!parse_double(trim(f), v)) throw DomainError("sweep: bad grid value '" + std::string(f) + "'");
    out.push_back(v);
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"UpliftRec: uplift-aware top-N recommendation"};
  app.require_subcommand(1);

  struct StageCmd {
    Stage stage;
    CLI::App* app;
    Overrides ov;
  };
  std::vector<std::unique_ptr<StageCmd>> stages;
  const std::pair<Stage, const char*> kStages[] = {
      {Stage::kTrain, "train the matrix-factorization backend"},
      {Stage::kCluster, "cluster items into categories"},
      {Stage::kAugment, "build the augmented sample set"},
      {Stage::kEstimate, "estimate propensity, ADRF and MTEF per user"},
      {Stage::kPlan, "produce top-N lists with the configured policy"},
      {Stage::kEvaluate, "score the lists"},
  };
  for (const auto& [stage, help] : kStages) {
    auto cmd = std::make_unique<StageCmd>();
    cmd->stage = stage;
    cmd->app = app.add_subcommand(to_string(stage), help);
    cmd->ov.attach(cmd->app);
    stages.push_back(std::move(cmd));
  }

  Overrides pipe_ov;
  auto* pipe = app.add_subcommand("pipeline", "run every stage end to end");
  pipe_ov.attach(pipe);

  Overrides sweep_ov;
  std::string sweep_param, sweep_values;
  auto* sweep_cmd = app.add_subcommand("sweep", "run the pipeline over a grid of one parameter");
  sweep_ov.attach(sweep_cmd);
  sweep_cmd->add_option("--param", sweep_param, "parameter name")
      ->required()
      ->check(CLI::IsMember(sweepable_parameters()));
  sweep_cmd->add_option("--values", sweep_values, "comma-separated grid")->required();

  WorldConfig world_cfg;
  std::string sim_out = "synthetic";
  int windows = 2, window_len = 20, random_items = 20;
  double strength = 0.8;
  auto* sim = app.add_subcommand("simulate", "write a synthetic dataset with known uplift curves");
  sim->add_option("-o,--output", sim_out);
  sim->add_option("--users", world_cfg.num_users);
  sim->add_option("--C", world_cfg.C);
  sim->add_option("--items-per-category", world_cfg.items_per_category);
  sim->add_option("--windows", windows, "logged windows per user");
  sim->add_option("--window-len", window_len);
  sim->add_option("--strength", strength, "confounding strength in [0,1)");
  sim->add_option("--random-items", random_items, "randomized exposures per user");
  sim->add_option("--seed", world_cfg.seed);

  std::string mat_in, mat_out;
  int threshold = 4;
  auto* imp = app.add_subcommand("import-matrix", "convert a dense rating matrix to interactions");
  imp->add_option("input", mat_in)->required()->check(CLI::ExistingFile);
  imp->add_option("output", mat_out)->required();
  imp->add_option("--threshold", threshold, "ratings >= threshold are positive");

  CLI11_PARSE(app, argc, argv);

  try {
    for (auto& cmd : stages) {
      if (!*cmd->app) continue;
      const RunConfig cfg = cmd->ov.build();
      Pipeline p;
      // The first stage has nothing upstream to insist on.
      const RunMode mode = cmd->stage == Stage::kTrain && !cmd->ov.resume ? RunMode::kFresh
                                                                          : RunMode::kStageOnly;
      print_result(p.run(cfg, cmd->stage, mode), cfg, cmd->stage);
      return EXIT_SUCCESS;
    }
    if (*pipe) {
      const RunConfig cfg = pipe_ov.build();
      Pipeline p;
      print_result(p.run(cfg, Stage::kEvaluate, pipe_ov.resume ? RunMode::kResume : RunMode::kFresh),
                   cfg, Stage::kEvaluate);
      return EXIT_SUCCESS;
    }
    if (*sweep_cmd) {
      const RunConfig cfg = sweep_ov.build();
      const auto grid = parse_grid(sweep_values);
      const auto points = sweep(cfg, sweep_param, grid);
      write_sweep_table(std::cout, sweep_param, points, cfg.cutoffs);
      return EXIT_SUCCESS;
    }
    if (*sim) {
      const auto world = make_world(world_cfg);
      const auto trails = simulate_logs(world, LoggingPolicy::confounded(strength), windows, window_len,
                                        world_cfg.seed + 1);
      const auto unbiased = simulate_random_exposure(world, random_items, world_cfg.seed + 2);
      const fs::path dir(sim_out);
      fs::create_directories(dir);
      std::ofstream train(dir / "train.tsv");
      for (const auto& t : trails) write_interactions(train, t.records);
      std::ofstream ub(dir / "unbiased.tsv");
      write_interactions(ub, unbiased);
      std::ofstream cats(dir / "categories.tsv");
      write_categories(cats, world.categories());
      std::ofstream truth(dir / "truth.tsv");
      write_truth(truth, world);
      RunConfig cfg;
      cfg.data.train = (dir / "train.tsv").string();
      cfg.data.unbiased = (dir / "unbiased.tsv").string();
      cfg.data.categories = (dir / "categories.tsv").string();
      cfg.data.has_position = true;
      cfg.hp.C = world_cfg.C;
      cfg.output_dir = (dir / "run").string();
      std::ofstream(dir / "config.json") << config_to_json(cfg).dump(2) << '\n';
      if (!train || !ub || !cats || !truth) throw Error("failed writing into " + dir.string());
      std::cout << "wrote " << trails.size() << " users to " << dir.string() << '\n';
      return EXIT_SUCCESS;
    }
    if (*imp) {
      std::ifstream in(mat_in);
      const auto records = parse_rating_matrix(in, threshold);
      std::ofstream out(mat_out);
      write_interactions(out, records, false);
      if (!out) throw Error("cannot write " + mat_out);
      std::cout << records.size() << " interactions\n";
      return EXIT_SUCCESS;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return EXIT_FAILURE;
  }
  return EXIT_FAILURE;
}
