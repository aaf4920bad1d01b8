// Copyright 2026 The dpsubsel Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>

#include "dpsubsel/experiment.hpp"
#include "test_util.hpp"

namespace dpsubsel {
namespace {

using testing::TempDir;
namespace fs = std::filesystem;

ExperimentConfig tiny_config(const fs::path& out) {
  ExperimentConfig c;
  c.dataset.synthetic.n_total = 1000;
  c.dataset.synthetic.n_val = 200;
  c.dataset.synthetic.n_test = 200;
  c.train.epochs = 3;
  c.train.selection_interval = 2;
  c.train.lot_size = 32;
  c.train.retain_steps = 1;
  c.strategies = {"glister-dp", "random-dp"};
  c.k_grid = {0.2};
  c.eps_grid = {3.0};
  c.seeds = {0, 1, 2};
  c.output_dir = out.string();
  c.workers = 2;
  return c;
}

std::vector<std::string> lines(const fs::path& p) {
  std::ifstream in(p);
  std::vector<std::string> out;
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

// Drops the total_seconds column (6th) of summary.csv rows.
std::vector<std::string> without_timing(std::vector<std::string> rows) {
  for (auto& r : rows) {
    std::vector<std::string> cells;
    std::stringstream ss(r);
    for (std::string c; std::getline(ss, c, ',');) cells.push_back(c);
    cells.erase(cells.begin() + 5);
    r.clear();
    for (const auto& c : cells) r += c + ",";
  }
  return rows;
}

TEST(Config, RoundTripIsValueIdentical) {
  auto c = tiny_config("x");
  c.train.arch = Architecture::mlp(16);
  c.train.scaling.mode = UtilityScaling::Mode::kFixed;
  c.dataset.imbalance = true;
  c.dataset.imbalance_lo = 0.7;
  c.r_values = {0.25, 0.75};
  const auto j = to_json(c);
  const auto back = config_from_json(j);
  EXPECT_TRUE(back == c);
  EXPECT_EQ(to_json(back).dump(), j.dump());
}

TEST(Config, PartialConfigKeepsDefaults) {
  const auto c = config_from_json(Json::parse(R"({"train": {"epochs": 7}})"));
  EXPECT_EQ(c.train.epochs, 7);
  EXPECT_EQ(c.train.lot_size, 256);
  EXPECT_EQ(c.dataset.kind, "synthetic");
}

TEST(Config, UnknownKeysAreErrors) {
  EXPECT_THROW(config_from_json(Json::parse(R"({"epsilon": 3})")), ConfigError);
  EXPECT_THROW(config_from_json(Json::parse(R"({"train": {"epoch": 3}})")), ConfigError);
  EXPECT_THROW(config_from_json(Json::parse(R"({"dataset": {"synthetic": {"n": 3}}})")),
               ConfigError);
  EXPECT_THROW(config_from_json(Json::parse(R"({"train": {"epochs": "many"}})")), ConfigError);
  EXPECT_THROW(config_from_json(Json::parse(R"({"train": {"scaling": "log"}})")), ConfigError);
}

TEST(Config, LoadValidatesPathsAndGrids) {
  TempDir dir;
  testing::spit(dir / "bad.json", R"({"dataset": {"kind": "idx-digits", "path": "/no/such"}})");
  EXPECT_THROW(load_config(dir / "bad.json"), ConfigError);
  testing::spit(dir / "empty.json", R"({"seeds": []})");
  EXPECT_THROW(load_config(dir / "empty.json"), ConfigError);
  testing::spit(dir / "syntax.json", R"({"seeds": [)");
  EXPECT_THROW(load_config(dir / "syntax.json"), ConfigError);
  EXPECT_THROW(load_config(dir / "missing.json"), ConfigError);
  testing::spit(dir / "ok.json", to_json(tiny_config("o")).dump());
  EXPECT_NO_THROW(load_config(dir / "ok.json"));
}

TEST(Experiment, CrossProductArtifactsAndDeterminism) {
  TempDir dir;
  const auto c = tiny_config(dir / "a");
  const auto r = run_experiment(c);
  EXPECT_TRUE(r.all_ok());
  ASSERT_EQ(r.runs.size(), 6u);
  std::size_t run_dirs = 0;
  for (const auto& e : fs::directory_iterator(dir / "a/runs")) {
    ++run_dirs;
    for (const char* f : {"record.csv", "summary.json", "ledger.jsonl", "subset.csv"}) {
      EXPECT_TRUE(fs::exists(e.path() / f)) << e.path() << "/" << f;
    }
  }
  EXPECT_EQ(run_dirs, 6u);
  EXPECT_TRUE(fs::exists(dir / "a/runs/glister-dp_eps3_k0.2_seed1/diagnostics.jsonl"));
  const auto summary = lines(dir / "a/summary.csv");
  ASSERT_EQ(summary.size(), 7u);
  EXPECT_EQ(summary[0], "strategy,eps,k,seed,final_accuracy,total_seconds,status");
  const auto agg = lines(dir / "a/aggregate.csv");
  ASSERT_EQ(agg.size(), 3u);
  EXPECT_EQ(agg[0], "strategy,eps,k,runs,mean_accuracy,std_accuracy,stderr_accuracy");
  EXPECT_EQ(agg[1].substr(0, 21), "glister-dp,3,0.2,3,0.");
  EXPECT_TRUE(config_from_json(Json::parse(testing::slurp(dir / "a/config.json"))) == c);

  auto c2 = c;
  c2.output_dir = (dir / "b").string();
  c2.workers = 1;
  run_experiment(c2);
  EXPECT_EQ(without_timing(summary), without_timing(lines(dir / "b/summary.csv")));
}

TEST(Experiment, FullGridShape) {
  TempDir dir;
  auto c = tiny_config(dir / "t1");
  c.train.epochs = 1;
  c.train.retain_steps = 0;
  c.dataset.synthetic.n_total = 640;
  c.k_grid = {0.1, 0.2, 0.3, 0.4, 0.5};
  c.eps_grid = {3.0, 8.0};
  c.seeds = {0};
  const auto r = run_experiment(c);
  EXPECT_TRUE(r.all_ok());
  EXPECT_EQ(lines(dir / "t1/aggregate.csv").size(), 21u);
}

TEST(Experiment, FailedRunsAreRecordedAndReported) {
  TempDir dir;
  auto c = tiny_config(dir / "f");
  c.k_grid = {0.01, 0.2};  // 10 examples < lot size 32
  c.seeds = {0};
  c.strategies = {"random-dp"};
  const auto r = run_experiment(c);
  EXPECT_FALSE(r.all_ok());
  const auto summary = lines(dir / "f/summary.csv");
  ASSERT_EQ(summary.size(), 3u);
  EXPECT_NE(summary[1].find("smaller than the lot size"), std::string::npos);
  EXPECT_NE(summary[2].find(",ok"), std::string::npos);
}

TEST(Experiment, SeedOffsetAndOutputRoot) {
  TempDir dir;
  auto c = tiny_config("rel_out");
  c.strategies = {"random-dp"};
  c.seeds = {0};
  ::setenv(kOutputRootEnv, dir.path().c_str(), 1);
  const auto r = run_experiment(c, 10);
  ::unsetenv(kOutputRootEnv);
  EXPECT_EQ(r.output_dir, dir / "rel_out");
  EXPECT_TRUE(fs::exists(dir / "rel_out/runs/random-dp_eps3_k0.2_seed10/record.csv"));
}

TEST(AllocationSweep, RowsPerRatio) {
  TempDir dir;
  auto c = tiny_config(dir / "s");
  c.seeds = {0, 1};
  c.r_values = {0.3, 0.6, 0.9};
  const auto r = run_allocation_sweep(c);
  EXPECT_TRUE(r.all_ok());
  EXPECT_EQ(lines(dir / "s/alloc.csv").size(), 7u);
  const auto agg = lines(dir / "s/alloc_aggregate.csv");
  ASSERT_EQ(agg.size(), 4u);
  EXPECT_EQ(agg[1].substr(0, 9), "0.3,3,0.2");
  c.r_values = {1.0};
  EXPECT_THROW(run_allocation_sweep(c), ConfigError);
}

TEST(Fig2, RowsPerRoundEqualPoolSize) {
  TempDir dir;
  auto c = tiny_config(dir / "g");
  c.strategies = {"glister-dp"};
  c.seeds = {0};
  run_experiment(c);
  const auto run = dir / "g/runs/glister-dp_eps3_k0.2_seed0";
  const auto reports = emit_fig2_data(run);
  ASSERT_EQ(reports.size(), 2u);  // epochs 0 and 2
  const auto rows = lines(run / "fig2.csv");
  EXPECT_EQ(rows[0], "round,rank,true_prob,em_prob");
  const auto pool = static_cast<std::size_t>(stochastic_pool_size(1000, 200, 0.01));
  EXPECT_EQ(reports[0].true_normalized.size(), pool);
  EXPECT_EQ(rows.size(), 1 + 2 * pool);
  const auto summary = Json::parse(testing::slurp(run / "fig2_summary.json"));
  EXPECT_EQ(summary.size(), 2u);
  EXPECT_EQ(summary[1]["epoch"], 2);
}

TEST(Fig2, UniformRoundGivesIdenticalFlatColumns) {
  TempDir dir;
  testing::spit(dir / "diagnostics.jsonl",
                R"({"round":0,"epoch":0,"eps0":0.01,"gamma":1.0,"steps":[{"step":0,)"
                R"("candidates":[4,5,6,7],"utilities":[0.5,0.5,0.5,0.5]}]})"
                "\n");
  const auto reports = emit_fig2_data(dir.path());
  ASSERT_EQ(reports.size(), 1u);
  const auto rows = lines(dir / "fig2.csv");
  ASSERT_EQ(rows.size(), 5u);
  for (std::size_t i = 1; i < rows.size(); ++i) {
    EXPECT_EQ(rows[i], std::to_string(0) + "," + std::to_string(i - 1) + ",0.25,0.25");
  }
}

TEST(Fig2, MissingDiagnosticsExplains) {
  TempDir dir;
  try {
    emit_fig2_data(dir.path());
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("retain_steps"), std::string::npos);
  }
}

TEST(Convergence, LongFormatRows) {
  TempDir dir;
  auto c = tiny_config(dir / "c");
  c.strategies = {"glister-dp", "random-dp", "full-dp"};
  c.seeds = {0};
  c.train.epochs = 4;
  run_experiment(c);
  EXPECT_EQ(emit_convergence_data(dir / "c"), 12u);
  const auto rows = lines(dir / "c/convergence.csv");
  EXPECT_EQ(rows[0], "strategy,eps,k,seed,epoch,wall_clock_s,test_accuracy");
  EXPECT_EQ(rows.size(), 13u);
  // Per run, the wall-clock column strictly increases.
  double prev = -1;
  std::string prev_run;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    std::vector<std::string> cells;
    std::stringstream ss(rows[i]);
    for (std::string x; std::getline(ss, x, ',');) cells.push_back(x);
    const std::string run = cells[0] + cells[2] + cells[3];
    const double wall = std::stod(cells[5]);
    if (run == prev_run) {
      EXPECT_GT(wall, prev);
    }
    prev_run = run;
    prev = wall;
  }
  EXPECT_THROW(emit_convergence_data(dir / "nothing"), ConfigError);
}

TEST(Datasets, CachedBinaryAndImbalance) {
  TempDir dir;
  const auto splits = generate_synthetic(SyntheticSpec{});
  write_dataset_cache(splits, dir / "cache");
  DatasetConfig d;
  d.kind = "cached-binary";
  d.path = (dir / "cache").string();
  const auto back = load_datasets(d);
  EXPECT_TRUE(back.train == splits.train);
  EXPECT_TRUE(back.test == splits.test);
  d.imbalance = true;
  const auto imb = load_datasets(d);
  EXPECT_LT(imb.train.size(), splits.train.size());
  EXPECT_TRUE(fs::exists(dir / "cache/val.csv"));
}

TEST(Config, ShippedConfigsParse) {
  const fs::path dir = fs::path(DPSUBSEL_SOURCE_DIR) / "configs";
  int seen = 0;
  for (const auto& e : fs::directory_iterator(dir)) {
    const auto j = Json::parse(testing::slurp(e.path()));
    if (j.contains("kind")) {
      Json wrapped;
      wrapped["dataset"] = j;
      EXPECT_NO_THROW(config_from_json(wrapped)) << e.path();
    } else {
      EXPECT_NO_THROW(config_from_json(j)) << e.path();
    }
    ++seen;
  }
  EXPECT_GE(seen, 5);
}

// ---- command-line driver ---------------------------------------------------------------

int run_cli(const std::string& args) {
  const std::string cmd = std::string(DPSUBSEL_CLI_PATH) + " " + args + " > /dev/null 2>&1";
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

TEST(Cli, VerbsAndExitCodes) {
  TempDir dir;
  auto c = tiny_config(dir / "cli");
  c.seeds = {0};
  testing::spit(dir / "cfg.json", to_json(c).dump(2));
  EXPECT_EQ(run_cli("run " + (dir / "cfg.json").string()), 0);
  EXPECT_TRUE(fs::exists(dir / "cli/summary.csv"));
  EXPECT_EQ(run_cli("convergence " + (dir / "cli").string()), 0);
  EXPECT_TRUE(fs::exists(dir / "cli/convergence.csv"));
  EXPECT_EQ(run_cli("fig2 " + (dir / "cli/runs/glister-dp_eps3_k0.2_seed0").string()), 0);
  EXPECT_EQ(run_cli("fig2 " + (dir / "cli/runs/random-dp_eps3_k0.2_seed0").string()), 2);

  c.k_grid = {0.01};
  testing::spit(dir / "fail.json", to_json(c).dump(2));
  EXPECT_EQ(run_cli("run " + (dir / "fail.json").string() + " --output " +
                    (dir / "fail").string()),
            1);
  testing::spit(dir / "typo.json", R"({"trian": {}})");
  EXPECT_EQ(run_cli("run " + (dir / "typo.json").string()), 2);

  testing::spit(dir / "spec.json", R"({"kind": "synthetic", "synthetic": {"n_total": 300}})");
  EXPECT_EQ(run_cli("gen-data " + (dir / "spec.json").string() + " -o " +
                    (dir / "data").string()),
            0);
  EXPECT_TRUE(fs::exists(dir / "data/train.bin"));
  EXPECT_EQ(load_binary(dir / "data/train.bin", Role::kTrain).size(), 300);
  EXPECT_NE(run_cli("bogus-verb"), 0);
}

}  // namespace
}  // namespace dpsubsel
