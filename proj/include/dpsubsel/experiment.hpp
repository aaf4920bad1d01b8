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

// Experiment configuration, the cross-product runner and the plot-data
// emitters behind the command-line tool.

#ifndef DPSUBSEL_EXPERIMENT_HPP_
#define DPSUBSEL_EXPERIMENT_HPP_

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "dpsubsel/data.hpp"
#include "dpsubsel/error.hpp"
#include "dpsubsel/io.hpp"
#include "dpsubsel/model.hpp"
#include "dpsubsel/privacy.hpp"
#include "dpsubsel/selection.hpp"
#include "dpsubsel/trainer.hpp"
#include "json.hpp"

namespace dpsubsel {

using Json = nlohmann::ordered_json;

inline constexpr const char* kOutputRootEnv = "DPSUBSEL_OUTPUT_ROOT";

// ---- strict JSON reading ------------------------------------------------------

namespace detail {

// Reads fields from one JSON object and rejects any key nobody asked for.
class StrictObject {
 public:
  StrictObject(const Json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError(where_ + " must be an object");
  }

  template <typename T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      out = it->template get<T>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(where_ + "." + key + ": " + e.what());
    }
  }

  const Json* child(const char* key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) throw ConfigError("unknown key " + where_ + "." + it.key());
    }
  }

  const std::string& where() const { return where_; }

 private:
  const Json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

}  // namespace detail

// ---- configuration ------------------------------------------------------------

struct DatasetConfig {
  std::string kind = "synthetic";  // synthetic | idx-digits | cached-binary
  std::string path;                // directory for idx-digits / cached-binary
  Index val_size = 5000;           // idx-digits validation carve
  std::uint64_t split_seed = 0;
  SyntheticSpec synthetic;
  // Optional per-class keep fractions drawn from [lo, hi] (train split only).
  bool imbalance = false;
  double imbalance_lo = 0.8;
  double imbalance_hi = 1.0;
  std::uint64_t imbalance_seed = 0;

  bool operator==(const DatasetConfig& o) const {
    return kind == o.kind && path == o.path && val_size == o.val_size &&
           split_seed == o.split_seed && synthetic.n_total == o.synthetic.n_total &&
           synthetic.n_val == o.synthetic.n_val && synthetic.n_test == o.synthetic.n_test &&
           synthetic.n_features == o.synthetic.n_features &&
           synthetic.num_classes == o.synthetic.num_classes &&
           synthetic.train_ratios == o.synthetic.train_ratios &&
           synthetic.val_ratios == o.synthetic.val_ratios &&
           synthetic.test_ratios == o.synthetic.test_ratios &&
           synthetic.seed == o.synthetic.seed && synthetic.separation == o.synthetic.separation &&
           imbalance == o.imbalance && imbalance_lo == o.imbalance_lo &&
           imbalance_hi == o.imbalance_hi && imbalance_seed == o.imbalance_seed;
  }
};

struct ExperimentConfig {
  DatasetConfig dataset;
  TrainConfig train;  // strategy, seeds, epsilon and subset fraction come from the grids
  std::vector<std::string> strategies{"glister-dp", "random-dp"};
  std::vector<double> k_grid{0.1};
  std::vector<double> eps_grid{3.0};
  std::vector<std::uint64_t> seeds{0};
  std::vector<double> r_values{0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9};
  std::string output_dir = "out";
  std::int64_t workers = 0;  // 0: hardware concurrency

  void validate() const {
    if (strategies.empty() || k_grid.empty() || eps_grid.empty() || seeds.empty()) {
      throw ConfigError("strategy, k, epsilon and seed grids must be nonempty");
    }
    for (const auto& s : strategies) parse_strategy(s);
    if (dataset.kind != "synthetic" && dataset.kind != "idx-digits" &&
        dataset.kind != "cached-binary") {
      throw ConfigError("unknown dataset kind '" + dataset.kind + "'");
    }
    if (dataset.kind != "synthetic" && !std::filesystem::exists(dataset.path)) {
      throw ConfigError("dataset path '" + dataset.path + "' does not exist");
    }
    if (dataset.kind == "synthetic") dataset.synthetic.validate();
  }
};

inline Json synthetic_to_json(const SyntheticSpec& s) {
  Json j;
  j["n_total"] = s.n_total;
  j["n_val"] = s.n_val;
  j["n_test"] = s.n_test;
  j["n_features"] = s.n_features;
  j["num_classes"] = s.num_classes;
  j["train_ratios"] = s.train_ratios;
  j["val_ratios"] = s.val_ratios;
  j["test_ratios"] = s.test_ratios;
  j["seed"] = s.seed;
  j["separation"] = s.separation;
  return j;
}

inline SyntheticSpec synthetic_from_json(const Json& j, const std::string& where) {
  SyntheticSpec s;
  detail::StrictObject o(j, where);
  o.get("n_total", s.n_total);
  o.get("n_val", s.n_val);
  o.get("n_test", s.n_test);
  o.get("n_features", s.n_features);
  o.get("num_classes", s.num_classes);
  o.get("train_ratios", s.train_ratios);
  o.get("val_ratios", s.val_ratios);
  o.get("test_ratios", s.test_ratios);
  o.get("seed", s.seed);
  o.get("separation", s.separation);
  o.finish();
  return s;
}

inline const char* scaling_mode_name(UtilityScaling::Mode m) {
  return m == UtilityScaling::Mode::kFixed ? "fixed" : "percentile";
}

inline Json to_json(const ExperimentConfig& c) {
  Json d;
  d["kind"] = c.dataset.kind;
  d["path"] = c.dataset.path;
  d["val_size"] = c.dataset.val_size;
  d["split_seed"] = c.dataset.split_seed;
  d["synthetic"] = synthetic_to_json(c.dataset.synthetic);
  Json imb;
  imb["enabled"] = c.dataset.imbalance;
  imb["lo"] = c.dataset.imbalance_lo;
  imb["hi"] = c.dataset.imbalance_hi;
  imb["seed"] = c.dataset.imbalance_seed;
  d["imbalance"] = imb;

  const auto& t = c.train;
  Json tj;
  tj["arch"] = t.arch.name();
  tj["eta"] = t.eta;
  tj["epochs"] = t.epochs;
  tj["lot_size"] = t.lot_size;
  tj["selection_interval"] = t.selection_interval;
  tj["clip"] = t.clip;
  tj["delta"] = t.budget.delta;
  tj["alloc_ratio"] = t.budget.alloc_ratio;
  tj["selection_delta_share"] = t.budget.selection_delta_share;
  tj["beta"] = t.beta;
  tj["gamma"] = t.scaling.gamma;
  tj["scaling"] = scaling_mode_name(t.scaling.mode);
  tj["percentile"] = t.scaling.percentile;
  tj["fixed_scale"] = t.scaling.fixed_scale;
  tj["val_subsample"] = t.val_subsample;
  tj["retain_steps"] = t.retain_steps;
  tj["advanced_composition"] = t.advanced_composition;
  tj["min_phase_eps"] = t.min_phase_eps;
  tj["sigma_floor"] = t.sigma_floor;
  tj["sigma_ceiling"] = t.sigma_ceiling;
  tj["track_train_loss"] = t.track_train_loss;

  Json j;
  j["dataset"] = d;
  j["train"] = tj;
  j["strategies"] = c.strategies;
  j["k_grid"] = c.k_grid;
  j["eps_grid"] = c.eps_grid;
  j["seeds"] = c.seeds;
  j["r_values"] = c.r_values;
  j["output_dir"] = c.output_dir;
  j["workers"] = c.workers;
  return j;
}

inline ExperimentConfig config_from_json(const Json& j) {
  ExperimentConfig c;
  detail::StrictObject top(j, "config");
  if (const Json* dj = top.child("dataset")) {
    detail::StrictObject d(*dj, "dataset");
    d.get("kind", c.dataset.kind);
    d.get("path", c.dataset.path);
    d.get("val_size", c.dataset.val_size);
    d.get("split_seed", c.dataset.split_seed);
    if (const Json* sj = d.child("synthetic")) {
      c.dataset.synthetic = synthetic_from_json(*sj, "dataset.synthetic");
    }
    if (const Json* ij = d.child("imbalance")) {
      detail::StrictObject im(*ij, "dataset.imbalance");
      im.get("enabled", c.dataset.imbalance);
      im.get("lo", c.dataset.imbalance_lo);
      im.get("hi", c.dataset.imbalance_hi);
      im.get("seed", c.dataset.imbalance_seed);
      im.finish();
    }
    d.finish();
  }
  if (const Json* tj = top.child("train")) {
    auto& t = c.train;
    detail::StrictObject o(*tj, "train");
    std::string arch = t.arch.name();
    o.get("arch", arch);
    t.arch = parse_architecture(arch);
    o.get("eta", t.eta);
    o.get("epochs", t.epochs);
    o.get("lot_size", t.lot_size);
    o.get("selection_interval", t.selection_interval);
    o.get("clip", t.clip);
    o.get("delta", t.budget.delta);
    o.get("alloc_ratio", t.budget.alloc_ratio);
    o.get("selection_delta_share", t.budget.selection_delta_share);
    o.get("beta", t.beta);
    o.get("gamma", t.scaling.gamma);
    std::string mode = scaling_mode_name(t.scaling.mode);
    o.get("scaling", mode);
    if (mode == "percentile") {
      t.scaling.mode = UtilityScaling::Mode::kPercentile;
    } else if (mode == "fixed") {
      t.scaling.mode = UtilityScaling::Mode::kFixed;
    } else {
      throw ConfigError("train.scaling must be 'percentile' or 'fixed'");
    }
    o.get("percentile", t.scaling.percentile);
    o.get("fixed_scale", t.scaling.fixed_scale);
    o.get("val_subsample", t.val_subsample);
    o.get("retain_steps", t.retain_steps);
    o.get("advanced_composition", t.advanced_composition);
    o.get("min_phase_eps", t.min_phase_eps);
    o.get("sigma_floor", t.sigma_floor);
    o.get("sigma_ceiling", t.sigma_ceiling);
    o.get("track_train_loss", t.track_train_loss);
    o.finish();
  }
  top.get("strategies", c.strategies);
  top.get("k_grid", c.k_grid);
  top.get("eps_grid", c.eps_grid);
  top.get("seeds", c.seeds);
  top.get("r_values", c.r_values);
  top.get("output_dir", c.output_dir);
  top.get("workers", c.workers);
  top.finish();
  return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  Json j;
  try {
    j = Json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  auto c = config_from_json(j);
  c.validate();
  return c;
}

inline bool operator==(const ExperimentConfig& a, const ExperimentConfig& b) {
  return to_json(a) == to_json(b) && a.dataset == b.dataset;
}

// ---- datasets -------------------------------------------------------------------

inline DatasetSplits load_datasets(const DatasetConfig& d) {
  DatasetSplits s = [&] {
    if (d.kind == "synthetic") return generate_synthetic(d.synthetic);
    if (d.kind == "idx-digits") return load_idx_digits(d.path, d.val_size, d.split_seed);
    if (d.kind == "cached-binary") {
      const std::filesystem::path dir(d.path);
      return DatasetSplits{load_binary(dir / "train.bin", Role::kTrain, "train"),
                           load_binary(dir / "val.bin", Role::kVal, "val"),
                           load_binary(dir / "test.bin", Role::kTest, "test")};
    }
    throw ConfigError("unknown dataset kind '" + d.kind + "'");
  }();
  if (d.imbalance) {
    s.train = induce_imbalance(
        s.train, random_imbalance_spec(s.train.num_classes(), d.imbalance_lo, d.imbalance_hi,
                                       d.imbalance_seed));
  }
  return s;
}

// Writes train.bin/val.bin/test.bin plus CSV copies into `dir`.
inline void write_dataset_cache(const DatasetSplits& s, const std::filesystem::path& dir) {
  save_binary(s.train, dir / "train.bin");
  save_binary(s.val, dir / "val.bin");
  save_binary(s.test, dir / "test.bin");
  save_csv(s.train, dir / "train.csv");
  save_csv(s.val, dir / "val.csv");
  save_csv(s.test, dir / "test.csv");
}

// ---- runner -----------------------------------------------------------------------

inline std::filesystem::path resolve_output_dir(const std::string& dir) {
  std::filesystem::path p(dir);
  if (p.is_relative()) {
    if (const char* root = std::getenv(kOutputRootEnv); root && *root) {
      return std::filesystem::path(root) / p;
    }
  }
  return p;
}

struct RunSpec {
  Strategy strategy = Strategy::kGlisterDp;
  double eps = 3.0;
  double k = 0.1;
  std::uint64_t seed = 0;
  double r = 0.0;  // only set by the allocation sweep

  std::string id() const {
    std::string s = std::string(strategy_name(strategy)) + "_eps" + io::fmt_double(eps) + "_k" +
                    io::fmt_double(k) + "_seed" + std::to_string(seed);
    if (r > 0.0) s += "_r" + io::fmt_double(r);
    return s;
  }
};

struct RunResult {
  RunSpec spec;
  bool ok = false;
  std::string error;
  double final_accuracy = 0.0;
  double total_seconds = 0.0;
};

inline TrainConfig train_config_for(const ExperimentConfig& c, const RunSpec& s) {
  TrainConfig t = c.train;
  t.strategy = s.strategy;
  t.budget.epsilon_total = s.eps;
  t.subset_fraction = s.k;
  t.seeds = SeedSet::from_base(s.seed);
  if (s.r > 0.0) t.budget.alloc_ratio = s.r;
  return t;
}

// Writes record.csv, summary.json, ledger.jsonl, subset.csv and (when
// selection diagnostics were retained) diagnostics.jsonl into `dir`.
inline void write_run_artifacts(const RunRecord& rec, const RunSpec& spec,
                                const std::filesystem::path& dir) {
  io::write_file_atomic(dir / "record.csv", record_to_csv(rec));
  io::write_file_atomic(dir / "ledger.jsonl", ledger_to_jsonl(rec.ledger));
  Json summary = record_summary(rec);
  summary["eps"] = spec.eps;
  summary["k"] = spec.k;
  summary["seed"] = spec.seed;
  io::write_file_atomic(dir / "summary.json", summary.dump(2) + "\n");
  std::string subset = "index\n";
  for (Index i : rec.final_subset) subset += std::to_string(i) + "\n";
  io::write_file_atomic(dir / "subset.csv", subset);
  if (!rec.diagnostics.empty()) {
    io::write_file_atomic(dir / "diagnostics.jsonl", diagnostics_to_jsonl(rec));
  }
}

struct Aggregate {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation
  double stderr_ = 0.0;
  std::size_t n = 0;
};

inline Aggregate aggregate(const std::vector<double>& v) {
  Aggregate a;
  a.n = v.size();
  if (v.empty()) return a;
  for (double x : v) a.mean += x;
  a.mean /= static_cast<double>(v.size());
  if (v.size() > 1) {
    double ss = 0.0;
    for (double x : v) ss += (x - a.mean) * (x - a.mean);
    a.std = std::sqrt(ss / static_cast<double>(v.size() - 1));
    a.stderr_ = a.std / std::sqrt(static_cast<double>(v.size()));
  }
  return a;
}

inline std::size_t effective_workers(std::int64_t w) {
  if (w > 0) return static_cast<std::size_t>(w);
  return std::max(1u, std::thread::hardware_concurrency());
}

// Executes every spec and writes per-run artifacts under out/runs/<id>.
inline std::vector<RunResult> execute_runs(const ExperimentConfig& c,
                                           const std::vector<RunSpec>& specs,
                                           const DatasetSplits& data,
                                           const std::filesystem::path& out) {
  std::vector<RunResult> results(specs.size());
  parallel_for(specs.size(), effective_workers(c.workers), [&](std::size_t i) {
    auto& res = results[i];
    res.spec = specs[i];
    try {
      const auto rec = run_training(train_config_for(c, specs[i]),
                                    Datasets{data.train, data.val, data.test});
      write_run_artifacts(rec, specs[i], out / "runs" / specs[i].id());
      res.ok = rec.status == "ok";
      if (!res.ok) res.error = rec.status;
      res.final_accuracy = rec.final_accuracy;
      res.total_seconds = rec.total_seconds;
    } catch (const std::exception& e) {
      res.ok = false;
      res.error = e.what();
    }
  });
  return results;
}

inline std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char ch : s) {
    if (ch == '"') out += '"';
    out += ch;
  }
  return out + "\"";
}

struct ExperimentResult {
  std::vector<RunResult> runs;
  std::filesystem::path output_dir;
  bool all_ok() const {
    return std::all_of(runs.begin(), runs.end(), [](const RunResult& r) { return r.ok; });
  }
};

// Cross product strategy x epsilon x k x seed. Writes summary.csv
// (strategy,eps,k,seed,final_accuracy,total_seconds,status) and
// aggregate.csv (strategy,eps,k,runs,mean_accuracy,std_accuracy,stderr_accuracy).
inline ExperimentResult run_experiment(const ExperimentConfig& c, std::uint64_t seed_offset = 0) {
  c.validate();
  const auto out = resolve_output_dir(c.output_dir);
  std::filesystem::create_directories(out);
  io::write_file_atomic(out / "config.json", to_json(c).dump(2) + "\n");
  const DatasetSplits data = load_datasets(c.dataset);

  std::vector<RunSpec> specs;
  for (const auto& s : c.strategies) {
    for (double eps : c.eps_grid) {
      for (double k : c.k_grid) {
        for (auto seed : c.seeds) specs.push_back({parse_strategy(s), eps, k, seed + seed_offset});
      }
    }
  }
  ExperimentResult result{execute_runs(c, specs, data, out), out};

  std::string summary = "strategy,eps,k,seed,final_accuracy,total_seconds,status\n";
  std::map<std::tuple<std::string, double, double>, std::vector<double>> cells;
  for (const auto& r : result.runs) {
    summary += std::string(strategy_name(r.spec.strategy)) + "," + io::fmt_double(r.spec.eps) +
               "," + io::fmt_double(r.spec.k) + "," + std::to_string(r.spec.seed) + "," +
               io::fmt_double(r.final_accuracy) + "," + io::fmt_double(r.total_seconds) + "," +
               csv_escape(r.ok ? "ok" : r.error) + "\n";
    if (r.ok) cells[{strategy_name(r.spec.strategy), r.spec.eps, r.spec.k}].push_back(r.final_accuracy);
  }
  io::write_file_atomic(out / "summary.csv", summary);

  std::string agg = "strategy,eps,k,runs,mean_accuracy,std_accuracy,stderr_accuracy\n";
  for (const auto& s : c.strategies) {
    for (double eps : c.eps_grid) {
      for (double k : c.k_grid) {
        const auto a = aggregate(cells[{s, eps, k}]);
        agg += s + "," + io::fmt_double(eps) + "," + io::fmt_double(k) + "," +
               std::to_string(a.n) + "," + io::fmt_double(a.mean) + "," + io::fmt_double(a.std) +
               "," + io::fmt_double(a.stderr_) + "\n";
      }
    }
  }
  io::write_file_atomic(out / "aggregate.csv", agg);
  return result;
}

// glister-dp at every r in r_values (x epsilon x k x seed). Writes alloc.csv
// (r,eps,k,seed,final_accuracy,status) and alloc_aggregate.csv
// (r,eps,k,runs,mean_accuracy,std_accuracy,stderr_accuracy).
inline ExperimentResult run_allocation_sweep(const ExperimentConfig& c,
                                             std::uint64_t seed_offset = 0) {
  c.validate();
  if (c.r_values.empty()) throw ConfigError("r_values must be nonempty");
  for (double r : c.r_values) {
    if (!(r > 0.0 && r < 1.0)) throw ConfigError("allocation ratios must lie in (0, 1)");
  }
  const auto out = resolve_output_dir(c.output_dir);
  std::filesystem::create_directories(out);
  io::write_file_atomic(out / "config.json", to_json(c).dump(2) + "\n");
  const DatasetSplits data = load_datasets(c.dataset);
  std::vector<RunSpec> specs;
  for (double eps : c.eps_grid) {
    for (double k : c.k_grid) {
      for (double r : c.r_values) {
        for (auto seed : c.seeds) {
          specs.push_back({Strategy::kGlisterDp, eps, k, seed + seed_offset, r});
        }
      }
    }
  }
  ExperimentResult result{execute_runs(c, specs, data, out), out};
  std::string rows = "r,eps,k,seed,final_accuracy,status\n";
  std::map<std::tuple<double, double, double>, std::vector<double>> cells;
  for (const auto& r : result.runs) {
    rows += io::fmt_double(r.spec.r) + "," + io::fmt_double(r.spec.eps) + "," +
            io::fmt_double(r.spec.k) + "," + std::to_string(r.spec.seed) + "," +
            io::fmt_double(r.final_accuracy) + "," + csv_escape(r.ok ? "ok" : r.error) + "\n";
    if (r.ok) cells[{r.spec.r, r.spec.eps, r.spec.k}].push_back(r.final_accuracy);
  }
  io::write_file_atomic(out / "alloc.csv", rows);
  std::string agg = "r,eps,k,runs,mean_accuracy,std_accuracy,stderr_accuracy\n";
  for (double eps : c.eps_grid) {
    for (double k : c.k_grid) {
      for (double r : c.r_values) {
        const auto a = aggregate(cells[{r, eps, k}]);
        agg += io::fmt_double(r) + "," + io::fmt_double(eps) + "," + io::fmt_double(k) + "," +
               std::to_string(a.n) + "," + io::fmt_double(a.mean) + "," + io::fmt_double(a.std) +
               "," + io::fmt_double(a.stderr_) + "\n";
      }
    }
  }
  io::write_file_atomic(out / "alloc_aggregate.csv", agg);
  return result;
}

// ---- emitters ---------------------------------------------------------------------

namespace detail {

inline std::vector<std::vector<std::string>> read_csv_rows(const std::filesystem::path& p) {
  std::ifstream in(p);
  if (!in) throw std::runtime_error("cannot open " + p.string());
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    rows.push_back(std::move(cells));
  }
  return rows;
}

}  // namespace detail

// Per retained selection round: the first retained step's pool, as
// round,rank,true_prob,em_prob sorted by true probability descending.
// Writes fig2.csv and fig2_summary.json into run_dir and returns the reports.
inline std::vector<GainDistributionReport> emit_fig2_data(const std::filesystem::path& run_dir) {
  const auto diag = run_dir / "diagnostics.jsonl";
  if (!std::filesystem::exists(diag)) {
    throw ConfigError("no selection diagnostics in " + run_dir.string() +
                      ": rerun a glister-dp strategy with train.retain_steps >= 1");
  }
  std::ifstream in(diag);
  std::string line;
  std::string csv = "round,rank,true_prob,em_prob\n";
  Json summary = Json::array();
  std::vector<GainDistributionReport> reports;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const Json j = Json::parse(line);
    if (j.at("steps").empty()) continue;
    const auto& step = j.at("steps").at(0);
    const auto u = step.at("utilities").get<std::vector<double>>();
    const auto eps0 = j.at("eps0").get<double>();
    const auto gamma = j.at("gamma").get<double>();
    auto rep = gain_distribution_report(u, eps0, gamma);
    const auto round = j.at("round").get<std::int64_t>();
    // Reuse the sorted layout of report_to_csv, prefixing the round.
    std::istringstream body(report_to_csv(rep));
    std::string row;
    std::getline(body, row);
    while (std::getline(body, row)) csv += std::to_string(round) + "," + row + "\n";
    Json s = report_summary(rep);
    s["round"] = round;
    s["epoch"] = j.at("epoch");
    s["eps0"] = eps0;
    summary.push_back(std::move(s));
    reports.push_back(std::move(rep));
  }
  io::write_file_atomic(run_dir / "fig2.csv", csv);
  io::write_file_atomic(run_dir / "fig2_summary.json", summary.dump(2) + "\n");
  return reports;
}

// Merges every run under exp_dir/runs into exp_dir/convergence.csv with
// columns strategy,eps,k,seed,epoch,wall_clock_s,test_accuracy. Returns the
// number of data rows.
inline std::size_t emit_convergence_data(const std::filesystem::path& exp_dir) {
  const auto runs = exp_dir / "runs";
  if (!std::filesystem::is_directory(runs)) {
    throw ConfigError("no runs directory under " + exp_dir.string());
  }
  std::vector<std::filesystem::path> dirs;
  for (const auto& e : std::filesystem::directory_iterator(runs)) {
    if (e.is_directory()) dirs.push_back(e.path());
  }
  std::sort(dirs.begin(), dirs.end());
  std::string csv = "strategy,eps,k,seed,epoch,wall_clock_s,test_accuracy\n";
  std::size_t n = 0;
  for (const auto& dir : dirs) {
    std::ifstream sj(dir / "summary.json");
    if (!sj) continue;
    const Json s = Json::parse(sj);
    const auto rows = detail::read_csv_rows(dir / "record.csv");
    if (rows.empty()) continue;
    const auto& header = rows.front();
    auto col = [&](const char* name) {
      const auto it = std::find(header.begin(), header.end(), name);
      if (it == header.end()) throw FormatError(std::string("record.csv lacks ") + name, 0);
      return static_cast<std::size_t>(it - header.begin());
    };
    const auto c_epoch = col("epoch");
    const auto c_wall = col("wall_clock_s");
    const auto c_acc = col("test_accuracy");
    const std::string prefix = s.at("strategy").get<std::string>() + "," +
                               io::fmt_double(s.at("eps").get<double>()) + "," +
                               io::fmt_double(s.at("k").get<double>()) + "," +
                               std::to_string(s.at("seed").get<std::uint64_t>()) + ",";
    for (std::size_t r = 1; r < rows.size(); ++r) {
      csv += prefix + rows[r][c_epoch] + "," + rows[r][c_wall] + "," + rows[r][c_acc] + "\n";
      ++n;
    }
  }
  io::write_file_atomic(exp_dir / "convergence.csv", csv);
  return n;
}

}  // namespace dpsubsel

#endif  // DPSUBSEL_EXPERIMENT_HPP_
