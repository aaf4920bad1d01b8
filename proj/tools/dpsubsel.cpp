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

// dpsubsel command-line driver.

#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "dpsubsel/dpsubsel.hpp"

namespace {

namespace fs = std::filesystem;
using dpsubsel::Json;

int report(const dpsubsel::ExperimentResult& r) {
  std::size_t failed = 0;
  for (const auto& run : r.runs) {
    if (!run.ok) {
      ++failed;
      std::cerr << "run " << run.spec.id() << " failed: " << run.error << "\n";
    }
  }
  std::cout << r.runs.size() - failed << "/" << r.runs.size() << " runs ok, artifacts in "
            << r.output_dir.string() << "\n";
  return failed == 0 ? 0 : 1;
}

// gen-data reads a dataset-only JSON spec (the "dataset" block of an
// experiment config) and writes the binary cache plus CSV copies.
int gen_data(const fs::path& spec_path, const std::string& out_dir) {
  std::ifstream in(spec_path);
  if (!in) throw dpsubsel::ConfigError("cannot open " + spec_path.string());
  Json spec = Json::parse(in);
  Json wrapped;
  wrapped["dataset"] = spec;
  const auto cfg = dpsubsel::config_from_json(wrapped);
  const auto data = dpsubsel::load_datasets(cfg.dataset);
  const auto out = dpsubsel::resolve_output_dir(out_dir);
  dpsubsel::write_dataset_cache(data, out);
  std::cout << "wrote train " << data.train.size() << ", val " << data.val.size() << ", test "
            << data.test.size() << " rows to " << out.string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Differentially private data subset selection experiments"};
  app.require_subcommand(1);

  std::string config_path;
  std::uint64_t seed_offset = 0;
  std::string output_override;

  auto* run = app.add_subcommand("run", "Run the strategy x k x epsilon x seed grid");
  run->add_option("config", config_path, "Experiment config (JSON)")->required();
  run->add_option("--seed-offset", seed_offset, "Added to every seed in the grid");
  run->add_option("--output", output_override, "Override output_dir");

  auto* sweep = app.add_subcommand("sweep-alloc", "GLISTER-DP over the allocation ratios r_values");
  sweep->add_option("config", config_path, "Experiment config (JSON)")->required();
  sweep->add_option("--seed-offset", seed_offset, "Added to every seed in the grid");
  sweep->add_option("--output", output_override, "Override output_dir");

  std::string dir;
  auto* fig2 = app.add_subcommand("fig2", "True vs exponential-mechanism selection distributions");
  fig2->add_option("run-dir", dir, "A single run directory")->required();

  auto* conv = app.add_subcommand("convergence", "Merge per-epoch accuracy and wall-clock");
  conv->add_option("exp-dir", dir, "Experiment output directory")->required();

  std::string spec_path;
  std::string data_out = "data";
  auto* gen = app.add_subcommand("gen-data", "Materialize a dataset spec as binary and CSV");
  gen->add_option("spec", spec_path, "Dataset spec (JSON)")->required();
  gen->add_option("-o,--output", data_out, "Output directory");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run || *sweep) {
      auto cfg = dpsubsel::load_config(config_path);
      if (!output_override.empty()) cfg.output_dir = output_override;
      return report(*run ? dpsubsel::run_experiment(cfg, seed_offset)
                         : dpsubsel::run_allocation_sweep(cfg, seed_offset));
    }
    if (*fig2) {
      const auto reports = dpsubsel::emit_fig2_data(dir);
      for (std::size_t i = 0; i < reports.size(); ++i) {
        std::cout << "round " << i << ": pool " << reports[i].true_normalized.size()
                  << ", tv(em, uniform) " << reports[i].tv_to_uniform << ", tv(true, uniform) "
                  << reports[i].tv_true_to_uniform << "\n";
      }
      return 0;
    }
    if (*conv) {
      const auto n = dpsubsel::emit_convergence_data(dir);
      std::cout << n << " rows written to " << (fs::path(dir) / "convergence.csv").string() << "\n";
      return 0;
    }
    if (*gen) return gen_data(spec_path, data_out);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
