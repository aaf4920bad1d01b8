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

// DP-SGD training loop and the three training strategies: validation-gain
// subset selection under DP (glister-dp), a uniform random subset
// (random-dp) and the full training set (full-dp).

#ifndef DPSUBSEL_TRAINER_HPP_
#define DPSUBSEL_TRAINER_HPP_

#include <algorithm>
#include <atomic>
#include <chrono>
#include <exception>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Dense>

#include "dpsubsel/data.hpp"
#include "dpsubsel/error.hpp"
#include "dpsubsel/io.hpp"
#include "dpsubsel/model.hpp"
#include "dpsubsel/privacy.hpp"
#include "dpsubsel/rng.hpp"
#include "dpsubsel/selection.hpp"
#include "json.hpp"

namespace dpsubsel {

enum class Strategy { kGlisterDp, kRandomDp, kFullDp };

inline const char* strategy_name(Strategy s) {
  switch (s) {
    case Strategy::kGlisterDp: return "glister-dp";
    case Strategy::kRandomDp: return "random-dp";
    case Strategy::kFullDp: return "full-dp";
  }
  return "?";
}

inline Strategy parse_strategy(const std::string& s) {
  if (s == "glister-dp") return Strategy::kGlisterDp;
  if (s == "random-dp") return Strategy::kRandomDp;
  if (s == "full-dp") return Strategy::kFullDp;
  throw ConfigError("unknown strategy '" + s + "'");
}

struct SeedSet {
  std::uint64_t model = 0;
  std::uint64_t sampling = 1;
  std::uint64_t noise = 2;
  std::uint64_t selection = 3;

  static SeedSet from_base(std::uint64_t base) {
    return {derive_seed(base, 1), derive_seed(base, 2), derive_seed(base, 3),
            derive_seed(base, 4)};
  }
  bool operator==(const SeedSet&) const = default;
};

struct TrainConfig {
  Architecture arch = Architecture::logistic();
  double eta = 0.1;
  std::int64_t epochs = 30;
  std::int64_t lot_size = 256;
  std::int64_t selection_interval = 5;
  double subset_fraction = 0.1;
  double clip = 1.0;
  PrivacyBudget budget;
  Strategy strategy = Strategy::kGlisterDp;
  SeedSet seeds;

  // Selection knobs (glister-dp only).
  double beta = 0.01;
  UtilityScaling scaling;
  Index val_subsample = 0;
  Index retain_steps = 0;
  bool advanced_composition = false;
  double min_phase_eps = 1e-6;
  // Non-private override: selection degenerates to exact greedy argmax.
  bool infinite_selection_eps = false;

  double sigma_floor = kPrivacyWallSigma;
  double sigma_ceiling = 1000.0;
  // Replaces the calibrated noise multiplier and disables accounting.
  std::optional<double> sigma_override;
  bool track_train_loss = true;

  Index subset_size(Index n) const {
    if (strategy == Strategy::kFullDp) return n;
    return std::clamp<Index>(
        static_cast<Index>(std::floor(subset_fraction * static_cast<double>(n) + 1e-9)), 1, n);
  }

  void validate(Index n_train) const {
    budget.validate();
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (lot_size < 1) throw ConfigError("lot size must be >= 1");
    if (selection_interval < 1) throw ConfigError("selection interval must be >= 1");
    if (!(eta > 0.0)) throw ConfigError("learning rate must be > 0");
    if (!(clip > 0.0)) throw ConfigError("clip norm must be > 0");
    if (!(subset_fraction > 0.0 && subset_fraction <= 1.0)) {
      throw ConfigError("subset fraction must lie in (0, 1]");
    }
    if (subset_size(n_train) < lot_size) {
      throw ConfigError("subset of " + std::to_string(subset_size(n_train)) +
                        " examples is smaller than the lot size " + std::to_string(lot_size));
    }
    if (!(budget.delta <= 1.0 / static_cast<double>(n_train))) {
      throw ConfigError("delta must be <= 1/|D_train| = " +
                        io::fmt_double(1.0 / static_cast<double>(n_train)));
    }
    if (strategy == Strategy::kGlisterDp) {
      if (budget.eps_train() < min_phase_eps || budget.eps_selection() < min_phase_eps) {
        throw ConfigError("allocation ratio " + io::fmt_double(budget.alloc_ratio) +
                          " leaves a phase below the minimum budget " +
                          io::fmt_double(min_phase_eps));
      }
      if (advanced_composition && !(budget.delta_selection() > 0.0)) {
        throw ConfigError("advanced composition needs selection_delta_share > 0");
      }
    }
  }

  std::int64_t selection_rounds() const {
    return (epochs + selection_interval - 1) / selection_interval;
  }

  SelectionConfig selection_config(Index n_train) const {
    SelectionConfig s;
    s.k = subset_size(n_train);
    s.eta = eta;
    s.beta = beta;
    s.scaling = scaling;
    s.val_subsample = val_subsample;
    s.retain_steps = retain_steps;
    s.advanced_composition = advanced_composition;
    s.infinite_eps0 = infinite_selection_eps;
    s.composition_delta =
        advanced_composition ? budget.delta_selection() / static_cast<double>(selection_rounds())
                             : 0.0;
    return s;
  }
};

struct EpochRow {
  std::int64_t epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double test_accuracy = 0.0;
  double wall_clock = 0.0;  // cumulative training + selection seconds
  double eps_train = 0.0;   // cumulative
  double eps_selection = 0.0;
  std::int64_t lots = 0;
};

struct RoundDiagnostics {
  std::int64_t round = 0;
  std::int64_t epoch = 0;
  double eps0 = 0.0;
  double gamma = 1.0;
  std::vector<StepDiagnostics> steps;
};

struct RunRecord {
  Strategy strategy = Strategy::kGlisterDp;
  std::vector<EpochRow> rows;
  double final_accuracy = 0.0;
  double total_seconds = 0.0;
  std::vector<Index> final_subset;
  double sigma = 0.0;
  double sampling_rate = 0.0;
  std::int64_t steps_per_epoch = 0;
  std::int64_t selection_rounds = 0;
  std::vector<RoundDiagnostics> diagnostics;
  std::vector<std::int64_t> selection_epochs;
  std::vector<std::vector<Index>> round_subsets;  // subset chosen at each selection
  std::vector<SpendRecord> ledger;
  PrivacyBudget budget;
  std::string status = "ok";
  ModelState model;
};

// Tracks DP-SGD privacy cost for fixed (q, sigma) as steps accumulate.
class TrainingAccountant {
 public:
  TrainingAccountant(double q, double sigma, double delta)
      : per_step_(rdp_subsampled_gaussian(q, sigma, 1)), delta_(delta) {}

  void advance(std::int64_t steps) { steps_ += steps; }
  std::int64_t steps() const { return steps_; }

  double epsilon() const {
    if (steps_ == 0) return 0.0;
    RdpCurve c = per_step_;
    for (double& v : c.values) v *= static_cast<double>(steps_);
    return rdp_to_eps(c, delta_);
  }

 private:
  RdpCurve per_step_;
  double delta_;
  std::int64_t steps_ = 0;
};

struct SgdStreams {
  Rng sampling;
  Rng noise;
};

// One epoch of DP-SGD over `subset`: ceil(|S| / B) Poisson lots with rate
// q = B / |S|; each lot's clipped gradient sum is noised and divided by the
// expected lot size. Returns the number of lots taken.
inline std::int64_t dp_sgd_epoch(ModelState& model, const LabeledDataset& train,
                                 std::span<const Index> subset, const TrainConfig& cfg,
                                 double sigma, SgdStreams& rng) {
  const auto n = static_cast<Index>(subset.size());
  if (n == 0) throw DomainError("cannot train on an empty subset");
  const double q = std::min(1.0, static_cast<double>(cfg.lot_size) / static_cast<double>(n));
  const std::int64_t steps = (n + cfg.lot_size - 1) / cfg.lot_size;
  const double expected_lot = q * static_cast<double>(n);
  std::vector<Index> lot;
  lot.reserve(static_cast<std::size_t>(2 * cfg.lot_size));
  for (std::int64_t t = 0; t < steps; ++t) {
    lot.clear();
    for (Index i : subset) {
      if (rng.sampling.bernoulli(q)) lot.push_back(i);
    }
    ClippedSum cs = clipped_gradient_sum(model, train, lot, cfg.clip);
    add_gaussian_noise(cs.sum, cfg.clip, sigma, rng.noise);
    model.theta.noalias() -= (cfg.eta / expected_lot) * cs.sum;
  }
  return steps;
}

struct Datasets {
  const LabeledDataset& train;
  const LabeledDataset& val;
  const LabeledDataset& test;
};

namespace detail {

using Clock = std::chrono::steady_clock;

inline double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

inline RunRecord run_strategy(const TrainConfig& cfg, const Datasets& data) {
  const Index n = data.train.size();
  cfg.validate(n);
  RunRecord rec;
  rec.strategy = cfg.strategy;
  rec.budget = cfg.budget;
  const bool glister = cfg.strategy == Strategy::kGlisterDp;
  // Baselines spend nothing on selection: the whole budget goes to training.
  if (!glister) {
    rec.budget.alloc_ratio = 1.0;
    rec.budget.selection_delta_share = 0.0;
  }
  PrivacyLedger ledger(rec.budget);

  const Index subset_n = cfg.subset_size(n);
  const double q = std::min(1.0, static_cast<double>(cfg.lot_size) / static_cast<double>(subset_n));
  const std::int64_t steps_per_epoch = (subset_n + cfg.lot_size - 1) / cfg.lot_size;
  const double train_eps = rec.budget.eps_train();
  const double train_delta = rec.budget.delta_train();

  rec.sampling_rate = q;
  rec.steps_per_epoch = steps_per_epoch;
  rec.sigma = cfg.sigma_override
                  ? *cfg.sigma_override
                  : calibrate_sigma(train_eps, train_delta, q, cfg.epochs * steps_per_epoch,
                                    cfg.sigma_floor, cfg.sigma_ceiling);
  const bool accounted = !cfg.sigma_override.has_value();
  std::optional<TrainingAccountant> accountant;
  if (accounted) accountant.emplace(q, rec.sigma, train_delta);

  ModelState model = init_model(cfg.arch, {data.train.num_features(), data.train.num_classes()},
                                cfg.seeds.model);
  SgdStreams sgd{Rng(cfg.seeds.sampling), Rng(cfg.seeds.noise)};
  Rng sel_rng(cfg.seeds.selection);

  std::vector<Index> subset;
  switch (cfg.strategy) {
    case Strategy::kFullDp: subset = all_indices(n); break;
    // glister-dp starts from a random S^0 that the epoch-0 selection replaces.
    case Strategy::kRandomDp:
    case Strategy::kGlisterDp: subset = random_subset(n, subset_n, sel_rng).indices; break;
  }

  const SelectionConfig sel_cfg = cfg.selection_config(n);
  const double eps_round =
      glister ? cfg.budget.eps_selection() / static_cast<double>(cfg.selection_rounds()) : 0.0;
  const auto val_idx = all_indices(data.val.size());
  double wall = 0.0;
  double eps_train_prev = 0.0;
  std::int64_t round = 0;

  try {
    for (std::int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
      const auto t0 = Clock::now();
      if (glister && epoch % cfg.selection_interval == 0) {
        auto out = dp_stochastic_greedy(model, data.train, data.val, sel_cfg, eps_round, ledger,
                                        sel_rng, round);
        subset = std::move(out.indices);
        rec.selection_epochs.push_back(epoch);
        rec.round_subsets.push_back(subset);
        if (!out.step_distributions.empty()) {
          rec.diagnostics.push_back(
              {round, epoch, out.eps0, cfg.scaling.gamma, std::move(out.step_distributions)});
        }
        ++round;
      }
      EpochRow row;
      row.epoch = epoch;
      row.lots = dp_sgd_epoch(model, data.train, subset, cfg, rec.sigma, sgd);
      if (accounted) {
        accountant->advance(row.lots);
        const double eps_now = accountant->epsilon();
        ledger.spend("dp-sgd", std::max(0.0, eps_now - eps_train_prev),
                     epoch == 0 ? train_delta : 0.0, Phase::kTrain, epoch);
        eps_train_prev = std::max(eps_train_prev, eps_now);
      }
      wall += seconds_since(t0);

      row.wall_clock = wall;
      row.train_loss = cfg.track_train_loss ? forward_loss(model, data.train, subset).loss : 0.0;
      row.val_loss = data.val.size() > 0 ? forward_loss(model, data.val, val_idx).loss : 0.0;
      row.test_accuracy = forward_loss(model, data.test).accuracy;
      row.eps_train = ledger.spent_eps(Phase::kTrain);
      row.eps_selection = ledger.spent_eps(Phase::kSelection);
      rec.rows.push_back(row);
    }
  } catch (const BudgetExceeded& e) {
    rec.status = std::string("halted: ") + e.what();
  }
  rec.selection_rounds = round;
  rec.final_accuracy = rec.rows.empty() ? 0.0 : rec.rows.back().test_accuracy;
  rec.total_seconds = wall;
  rec.final_subset = std::move(subset);
  rec.ledger = ledger.snapshot();
  rec.model = std::move(model);
  return rec;
}

}  // namespace detail

// Training budget eps * r, selection budget eps * (1 - r) split evenly over
// ceil(T / L) rounds; selection runs at every epoch with epoch % L == 0 and
// the subset carries forward in between.
inline RunRecord run_glister_dp(const TrainConfig& cfg, const Datasets& data) {
  if (cfg.strategy != Strategy::kGlisterDp) {
    throw ConfigError("run_glister_dp needs strategy glister-dp");
  }
  return detail::run_strategy(cfg, data);
}

inline RunRecord run_baseline(const TrainConfig& cfg, const Datasets& data) {
  if (cfg.strategy == Strategy::kGlisterDp) {
    throw ConfigError("run_baseline needs strategy random-dp or full-dp");
  }
  return detail::run_strategy(cfg, data);
}

inline RunRecord run_training(const TrainConfig& cfg, const Datasets& data) {
  return cfg.strategy == Strategy::kGlisterDp ? run_glister_dp(cfg, data)
                                              : run_baseline(cfg, data);
}

// Runs `fn(i)` for i in [0, n) on up to `workers` threads.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t workers, Fn&& fn) {
  workers = std::max<std::size_t>(1, std::min(workers, n));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = next++; i < n; i = next++) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

struct AllocationPoint {
  double r = 0.0;
  double accuracy = 0.0;
  RunRecord record;
};

// One glister-dp run per allocation ratio with otherwise identical config.
inline std::vector<AllocationPoint> allocation_sweep(const TrainConfig& base,
                                                     std::span<const double> r_values,
                                                     const Datasets& data,
                                                     std::size_t workers = 1) {
  for (double r : r_values) {
    if (!(r > 0.0 && r < 1.0)) throw ConfigError("allocation ratios must lie in (0, 1)");
  }
  std::vector<AllocationPoint> out(r_values.size());
  parallel_for(r_values.size(), workers, [&](std::size_t i) {
    TrainConfig cfg = base;
    cfg.strategy = Strategy::kGlisterDp;
    cfg.budget.alloc_ratio = r_values[i];
    out[i].r = r_values[i];
    out[i].record = run_glister_dp(cfg, data);
    out[i].accuracy = out[i].record.final_accuracy;
  });
  return out;
}

// ---- exports ------------------------------------------------------------------

inline std::string record_to_csv(const RunRecord& r) {
  std::string out =
      "epoch,train_loss,val_loss,test_accuracy,wall_clock_s,eps_train,eps_selection,lots\n";
  for (const auto& row : r.rows) {
    out += std::to_string(row.epoch) + "," + io::fmt_double(row.train_loss) + "," +
           io::fmt_double(row.val_loss) + "," + io::fmt_double(row.test_accuracy) + "," +
           io::fmt_double(row.wall_clock) + "," + io::fmt_double(row.eps_train) + "," +
           io::fmt_double(row.eps_selection) + "," + std::to_string(row.lots) + "\n";
  }
  return out;
}

inline nlohmann::ordered_json record_summary(const RunRecord& r) {
  nlohmann::ordered_json j;
  j["strategy"] = strategy_name(r.strategy);
  j["status"] = r.status;
  j["final_accuracy"] = r.final_accuracy;
  j["total_seconds"] = r.total_seconds;
  j["sigma"] = r.sigma;
  j["sampling_rate"] = r.sampling_rate;
  j["steps_per_epoch"] = r.steps_per_epoch;
  j["selection_rounds"] = r.selection_rounds;
  j["subset_size"] = r.final_subset.size();
  j["epsilon_total"] = r.budget.epsilon_total;
  j["delta"] = r.budget.delta;
  j["alloc_ratio"] = r.budget.alloc_ratio;
  double eg = 0.0, es = 0.0, dt = 0.0;
  for (const auto& s : r.ledger) {
    (s.phase == Phase::kTrain ? eg : es) += s.eps;
    dt += s.delta;
  }
  j["spent_eps_train"] = eg;
  j["spent_eps_selection"] = es;
  j["spent_delta"] = dt;
  return j;
}

// One JSON object per retained selection round.
inline std::string diagnostics_to_jsonl(const RunRecord& r) {
  std::string out;
  for (const auto& d : r.diagnostics) {
    nlohmann::ordered_json j;
    j["round"] = d.round;
    j["epoch"] = d.epoch;
    j["eps0"] = d.eps0;
    j["gamma"] = d.gamma;
    auto steps = nlohmann::ordered_json::array();
    for (const auto& s : d.steps) {
      nlohmann::ordered_json sj;
      sj["step"] = s.step;
      sj["candidates"] = s.candidates;
      sj["utilities"] = s.utilities;
      steps.push_back(std::move(sj));
    }
    j["steps"] = std::move(steps);
    out += j.dump() + "\n";
  }
  return out;
}

}  // namespace dpsubsel

#endif  // DPSUBSEL_TRAINER_HPP_
