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

// Subset selection: the one-step Taylor validation gain on last-layer
// gradients, (DP) stochastic greedy maximization and uniform subsets.

#ifndef DPSUBSEL_SELECTION_HPP_
#define DPSUBSEL_SELECTION_HPP_

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "dpsubsel/data.hpp"
#include "dpsubsel/error.hpp"
#include "dpsubsel/io.hpp"
#include "dpsubsel/model.hpp"
#include "dpsubsel/privacy.hpp"
#include "dpsubsel/rng.hpp"
#include "json.hpp"

namespace dpsubsel {

// ---- gain context -----------------------------------------------------------

// Working state for the validation-gain proxy. The hidden representation is
// frozen at the model's current parameters; only the final layer (theta_hat)
// moves as elements are picked.
struct GainContext {
  RowMatrix train_h;  // penultimate features of every train example
  std::vector<int> train_y;
  RowMatrix val_h;
  std::vector<int> val_y;
  RowMatrix w;        // theta_hat weights, classes x fan
  Eigen::VectorXd b;  // theta_hat biases
  double eta = 0.1;
  RowMatrix val_grad_w;  // mean validation gradient at theta_hat
  Eigen::VectorXd val_grad_b;

  Index classes() const { return w.rows(); }
  Index fan() const { return w.cols(); }
  Index train_size() const { return train_h.rows(); }
};

namespace detail {

inline Eigen::VectorXd softmax_residual(const Eigen::VectorXd& z, int y) {
  const double mx = z.maxCoeff();
  Eigen::VectorXd p = (z.array() - mx).exp().matrix();
  p /= p.sum();
  p(y) -= 1.0;
  return p;
}

}  // namespace detail

// Recomputes the mean validation gradient of the last layer at theta_hat.
inline void refresh_val_grad(GainContext& ctx) {
  RowMatrix z = ctx.val_h * ctx.w.transpose();
  z.rowwise() += ctx.b.transpose();
  for (Index r = 0; r < z.rows(); ++r) {
    const double mx = z.row(r).maxCoeff();
    z.row(r) = (z.row(r).array() - mx).exp().matrix();
    z.row(r) /= z.row(r).sum();
    z(r, ctx.val_y[static_cast<std::size_t>(r)]) -= 1.0;
  }
  const double inv = 1.0 / static_cast<double>(std::max<Index>(1, z.rows()));
  ctx.val_grad_w.noalias() = inv * (z.transpose() * ctx.val_h);
  ctx.val_grad_b = inv * z.colwise().sum().transpose();
}

// Builds the context at `model`. A positive `val_subsample` restricts the
// validation gradient to that many seeded-uniform validation rows.
inline GainContext make_gain_context(const ModelState& model, const LabeledDataset& train,
                                     const LabeledDataset& val, double eta,
                                     Index val_subsample = 0, std::uint64_t seed = 0) {
  if (val.size() == 0) throw DomainError("gain computation needs a nonempty validation set");
  GainContext ctx;
  ctx.eta = eta;
  const auto train_idx = all_indices(train.size());
  ctx.train_h = penultimate_features(model, train, train_idx);
  ctx.train_y = train.labels();
  std::vector<Index> val_idx = all_indices(val.size());
  if (val_subsample > 0 && val_subsample < val.size()) {
    Rng rng(derive_seed(seed, 211));
    std::shuffle(val_idx.begin(), val_idx.end(), rng);
    val_idx.resize(static_cast<std::size_t>(val_subsample));
    std::sort(val_idx.begin(), val_idx.end());
  }
  ctx.val_h = penultimate_features(model, val, val_idx);
  for (Index i : val_idx) ctx.val_y.push_back(val.label(i));
  const Index off = model.last_layer_offset();
  const Index c = model.dims.classes;
  const Index fan = model.last_layer_width();
  ctx.w = Eigen::Map<const RowMatrix>(model.theta.data() + off, c, fan);
  ctx.b = model.theta.segment(off + c * fan, c);
  refresh_val_grad(ctx);
  return ctx;
}

// Last-layer gradient of train example e at theta_hat, flattened as
// [W (c x fan) row-major, b (c)].
inline Eigen::VectorXd candidate_gradient(const GainContext& ctx, Index e) {
  const Eigen::VectorXd h = ctx.train_h.row(e).transpose();
  const Eigen::VectorXd d =
      detail::softmax_residual(ctx.w * h + ctx.b, ctx.train_y[static_cast<std::size_t>(e)]);
  Eigen::VectorXd g(ctx.classes() * (ctx.fan() + 1));
  for (Index k = 0; k < ctx.classes(); ++k) g.segment(k * ctx.fan(), ctx.fan()) = d(k) * h;
  g.tail(ctx.classes()) = d;
  return g;
}

inline Eigen::VectorXd flat_val_grad(const GainContext& ctx) {
  Eigen::VectorXd g(ctx.classes() * (ctx.fan() + 1));
  for (Index k = 0; k < ctx.classes(); ++k) {
    g.segment(k * ctx.fan(), ctx.fan()) = ctx.val_grad_w.row(k).transpose();
  }
  g.tail(ctx.classes()) = ctx.val_grad_b;
  return g;
}

// Raw gains eta * <grad l_e(theta_hat), grad L_V(theta_hat)> restricted to the
// last layer: the first-order decrease in validation loss from one gradient
// step on e.
inline std::vector<double> compute_gains(const GainContext& ctx,
                                         std::span<const Index> candidates) {
  if (candidates.empty()) throw DomainError("compute_gains on an empty candidate set");
  std::vector<double> gains(candidates.size());
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const Index e = candidates[i];
    if (e < 0 || e >= ctx.train_size()) throw DomainError("candidate index out of range");
    const Eigen::VectorXd h = ctx.train_h.row(e).transpose();
    const Eigen::VectorXd d =
        detail::softmax_residual(ctx.w * h + ctx.b, ctx.train_y[static_cast<std::size_t>(e)]);
    // <d h^T, G_w> + <d, G_b> = d^T (G_w h + G_b)
    gains[i] = ctx.eta * d.dot(ctx.val_grad_w * h + ctx.val_grad_b);
  }
  return gains;
}

// theta_hat <- theta_hat - eta * grad l_e(theta_hat), then refresh.
inline void apply_selection_step(GainContext& ctx, Index e) {
  const Eigen::VectorXd h = ctx.train_h.row(e).transpose();
  const Eigen::VectorXd d =
      detail::softmax_residual(ctx.w * h + ctx.b, ctx.train_y[static_cast<std::size_t>(e)]);
  ctx.w.noalias() -= ctx.eta * d * h.transpose();
  ctx.b -= ctx.eta * d;
  refresh_val_grad(ctx);
}

// ---- utility normalization --------------------------------------------------

struct UtilityScaling {
  enum class Mode { kPercentile, kFixed };
  Mode mode = Mode::kPercentile;
  double gamma = 1.0;       // utilities end up in [0, gamma]; also the sensitivity
  double percentile = 0.95;
  double fixed_scale = 1.0;  // kFixed: u = clamp(raw / fixed_scale, 0, gamma)
};

// Maps raw gains into [0, gamma]. Percentile mode divides by the pool's
// percentile of the raw gains (falling back to the pool maximum) and clips;
// negative gains map to 0. That scale is data dependent and is not charged to
// the ledger; kFixed avoids it.
inline std::vector<double> normalize_gains(std::span<const double> raw,
                                           const UtilityScaling& s) {
  std::vector<double> u(raw.size(), 0.0);
  if (raw.empty()) return u;
  double scale = s.fixed_scale;
  if (s.mode == UtilityScaling::Mode::kPercentile) {
    std::vector<double> sorted(raw.begin(), raw.end());
    std::sort(sorted.begin(), sorted.end());
    // Nearest-rank percentile.
    const auto rank = static_cast<std::size_t>(
        std::ceil(s.percentile * static_cast<double>(sorted.size())));
    scale = sorted[std::clamp<std::size_t>(rank, 1, sorted.size()) - 1];
    if (!(scale > 0.0)) scale = sorted.back();
    if (!(scale > 0.0)) return u;  // no positive gain in the pool
  }
  for (std::size_t i = 0; i < raw.size(); ++i) {
    u[i] = std::clamp(s.gamma * raw[i] / scale, 0.0, s.gamma);
  }
  return u;
}

// ---- outcomes ---------------------------------------------------------------

struct StepDiagnostics {
  Index step = 0;
  std::vector<Index> candidates;
  std::vector<double> utilities;  // normalized gains handed to the mechanism
  std::vector<double> em_probs;   // exact sampling distribution over the pool
};

struct SelectionOutcome {
  std::vector<Index> indices;
  std::vector<double> step_gains;  // raw gain of the element picked at each step
  std::vector<StepDiagnostics> step_distributions;
  double eps0 = 0.0;  // per-step mechanism epsilon (0 for non-private runs)
};

struct SelectionConfig {
  Index k = 1;
  double eta = 0.1;
  double beta = 0.01;  // stochastic-greedy pool parameter; 0 means full pool
  UtilityScaling scaling;
  Index val_subsample = 0;
  Index retain_steps = 0;  // keep diagnostics for the first N steps of a call
  bool infinite_eps0 = false;  // degenerate mechanism: exact argmax
  bool advanced_composition = false;
  double composition_delta = 0.0;  // delta' per round under advanced composition
};

// Pool size min(n, ceil((n / k) ln(1 / beta))).
inline Index stochastic_pool_size(Index n, Index k, double beta) {
  if (!(beta > 0.0) || beta >= 1.0) return n;
  const double s = std::ceil(static_cast<double>(n) / static_cast<double>(k) *
                             std::log(1.0 / beta));
  return std::clamp<Index>(static_cast<Index>(s), 1, n);
}

// Draws a uniform candidate pool from the unpicked elements and hands it to
// the caller; keeps the unpicked set in an order that is a pure function of
// the draws so runs are reproducible.
class CandidatePool {
 public:
  explicit CandidatePool(Index n) : remaining_(all_indices(n)) {}

  Index remaining() const { return static_cast<Index>(remaining_.size()); }

  std::span<const Index> draw(Index s, Rng& rng) {
    const auto n = remaining_.size();
    const auto take = static_cast<std::size_t>(std::min<Index>(s, remaining()));
    for (std::size_t i = 0; i < take; ++i) {
      const auto j = i + static_cast<std::size_t>(rng.below(n - i));
      std::swap(remaining_[i], remaining_[j]);
    }
    return std::span<const Index>(remaining_.data(), take);
  }

  // Removes the element at position `pos` of the last drawn pool.
  void remove_at(std::size_t pos) {
    remaining_[pos] = remaining_.back();
    remaining_.pop_back();
  }

 private:
  std::vector<Index> remaining_;
};

// Generic stochastic greedy driver. `Oracle` supplies
//   std::vector<double> gains(std::span<const Index> pool)
//   void commit(Index element)
// and `choose(pool, gains)` returns the position picked within the pool.
template <typename Oracle, typename Chooser>
SelectionOutcome greedy_driver(Index n, Index k, double beta, Oracle& oracle,
                               Chooser&& choose, Rng& pool_rng) {
  if (k < 0 || k > n) {
    throw DomainError("subset size " + std::to_string(k) + " exceeds " + std::to_string(n));
  }
  SelectionOutcome out;
  CandidatePool pool(n);
  const Index s = stochastic_pool_size(n, std::max<Index>(k, 1), beta);
  for (Index step = 0; step < k && pool.remaining() > 0; ++step) {
    const auto cand = pool.draw(s, pool_rng);
    const std::vector<double> gains = oracle.gains(cand);
    const std::size_t pos = choose(step, cand, gains);
    const Index e = cand[pos];
    out.indices.push_back(e);
    out.step_gains.push_back(gains[pos]);
    pool.remove_at(pos);
    oracle.commit(e);
  }
  return out;
}

// Position of the largest gain; ties go to the lowest element index.
inline std::size_t argmax_by_index(std::span<const Index> cand, std::span<const double> g) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < g.size(); ++i) {
    if (g[i] > g[best] || (g[i] == g[best] && cand[i] < cand[best])) best = i;
  }
  return best;
}

// Non-private stochastic greedy over any oracle.
template <typename Oracle>
SelectionOutcome stochastic_greedy(Index n, Index k, double beta, Oracle& oracle, Rng& rng) {
  Rng pool_rng = rng.split();
  Rng unused = rng.split();
  (void)unused;
  return greedy_driver(n, k, beta, oracle,
                       [](Index, std::span<const Index> c, const std::vector<double>& g) {
                         return argmax_by_index(c, g);
                       },
                       pool_rng);
}

// Private stochastic greedy: argmax replaced by the exponential mechanism on
// normalized utilities with sensitivity gamma. Pool draws use the same
// stream as stochastic_greedy for a given rng.
template <typename Oracle>
SelectionOutcome dp_greedy(Index n, double eps0, const SelectionConfig& cfg, Oracle& oracle,
                           Rng& rng) {
  Rng pool_rng = rng.split();
  Rng mech_rng = rng.split();
  std::vector<StepDiagnostics> diag;
  auto choose = [&](Index step, std::span<const Index> cand, const std::vector<double>& g) {
    if (cfg.infinite_eps0) return argmax_by_index(cand, g);
    const auto u = normalize_gains(g, cfg.scaling);
    if (step < cfg.retain_steps) {
      diag.push_back({step, std::vector<Index>(cand.begin(), cand.end()), u,
                      sampling_distribution(u, eps0, cfg.scaling.gamma)});
    }
    return exp_mechanism_sample(u, eps0, cfg.scaling.gamma, mech_rng);
  };
  auto out = greedy_driver(n, cfg.k, cfg.beta, oracle, choose, pool_rng);
  out.step_distributions = std::move(diag);
  out.eps0 = cfg.infinite_eps0 ? std::numeric_limits<double>::infinity() : eps0;
  return out;
}

// Oracle backed by a GainContext (the validation-gain proxy).
class ValidationGainOracle {
 public:
  explicit ValidationGainOracle(GainContext& ctx) : ctx_(ctx) {}
  std::vector<double> gains(std::span<const Index> pool) { return compute_gains(ctx_, pool); }
  void commit(Index e) { apply_selection_step(ctx_, e); }

 private:
  GainContext& ctx_;
};

inline SelectionOutcome stochastic_greedy(const ModelState& model, const LabeledDataset& train,
                                          const LabeledDataset& val, const SelectionConfig& cfg,
                                          Rng& rng) {
  if (cfg.k > train.size()) throw DomainError("k exceeds the training set size");
  auto ctx = make_gain_context(model, train, val, cfg.eta, cfg.val_subsample);
  ValidationGainOracle oracle(ctx);
  return stochastic_greedy(train.size(), cfg.k, cfg.beta, oracle, rng);
}

// Per-step epsilon for one private greedy call worth eps_round.
inline double selection_step_eps(double eps_round, const SelectionConfig& cfg) {
  const Index k = std::max<Index>(cfg.k, 1);
  if (cfg.advanced_composition) {
    return advanced_composition_step_eps(eps_round, k, cfg.composition_delta);
  }
  return eps_round / static_cast<double>(k);
}

// Debits eps_round (plus delta' under advanced composition) from the
// selection phase before any sampling, then runs the private greedy.
inline SelectionOutcome dp_stochastic_greedy(const ModelState& model,
                                             const LabeledDataset& train,
                                             const LabeledDataset& val,
                                             const SelectionConfig& cfg, double eps_round,
                                             PrivacyLedger& ledger, Rng& rng,
                                             std::int64_t round = 0) {
  if (cfg.k > train.size()) throw DomainError("k exceeds the training set size");
  if (!(eps_round > 0.0)) throw DomainError("selection round epsilon must be > 0");
  const double round_delta =
      cfg.advanced_composition ? cfg.composition_delta : 0.0;
  ledger.spend("exponential-mechanism", eps_round, round_delta, Phase::kSelection, round);
  const double eps0 = selection_step_eps(eps_round, cfg);
  // Each round sees a fresh validation subsample.
  auto ctx = make_gain_context(model, train, val, cfg.eta, cfg.val_subsample,
                               static_cast<std::uint64_t>(round));
  ValidationGainOracle oracle(ctx);
  return dp_greedy(train.size(), eps0, cfg, oracle, rng);
}

inline SelectionOutcome random_subset(Index n, Index k, Rng& rng) {
  if (k < 0 || k > n) throw DomainError("subset size exceeds the dataset");
  CandidatePool pool(n);
  const auto picked = pool.draw(k, rng);
  SelectionOutcome out;
  out.indices.assign(picked.begin(), picked.end());
  out.step_gains.assign(static_cast<std::size_t>(k), 0.0);
  return out;
}

inline SelectionOutcome random_subset(const LabeledDataset& train, Index k, Rng& rng) {
  return random_subset(train.size(), k, rng);
}

// ---- diagnostics --------------------------------------------------------------

struct GainDistributionReport {
  std::vector<double> true_normalized;
  std::vector<double> em_distribution;
  double tv_to_uniform = 0.0;       // of em_distribution
  double tv_true_to_uniform = 0.0;  // of true_normalized
  double tv_between = 0.0;
};

// Compares clipped gains normalized to sum one against the distribution the
// exponential mechanism samples from.
inline GainDistributionReport gain_distribution_report(std::span<const double> gains,
                                                       double eps0, double gamma) {
  if (gains.empty()) throw DomainError("gain report over an empty vector");
  GainDistributionReport r;
  std::vector<double> clipped(gains.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < gains.size(); ++i) {
    clipped[i] = std::clamp(gains[i], 0.0, gamma);
    sum += clipped[i];
  }
  r.true_normalized.resize(gains.size());
  for (std::size_t i = 0; i < gains.size(); ++i) {
    r.true_normalized[i] =
        sum > 0.0 ? clipped[i] / sum : 1.0 / static_cast<double>(gains.size());
  }
  r.em_distribution = sampling_distribution(clipped, eps0, gamma);
  r.tv_to_uniform = tv_to_uniform(r.em_distribution);
  r.tv_true_to_uniform = tv_to_uniform(r.true_normalized);
  r.tv_between = total_variation(r.true_normalized, r.em_distribution);
  return r;
}

// `step,index,gain`
inline std::string selection_to_csv(const SelectionOutcome& s) {
  std::string out = "step,index,gain\n";
  for (std::size_t i = 0; i < s.indices.size(); ++i) {
    out += std::to_string(i) + "," + std::to_string(s.indices[i]) + "," +
           io::fmt_double(s.step_gains[i]) + "\n";
  }
  return out;
}

// `rank,true_prob,em_prob`, sorted by true probability descending.
inline std::string report_to_csv(const GainDistributionReport& r) {
  std::vector<std::size_t> order(r.true_normalized.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return r.true_normalized[a] > r.true_normalized[b];
  });
  std::string out = "rank,true_prob,em_prob\n";
  for (std::size_t i = 0; i < order.size(); ++i) {
    out += std::to_string(i) + "," + io::fmt_double(r.true_normalized[order[i]]) + "," +
           io::fmt_double(r.em_distribution[order[i]]) + "\n";
  }
  return out;
}

inline nlohmann::ordered_json report_summary(const GainDistributionReport& r) {
  nlohmann::ordered_json j;
  j["size"] = r.true_normalized.size();
  j["tv_em_to_uniform"] = r.tv_to_uniform;
  j["tv_true_to_uniform"] = r.tv_true_to_uniform;
  j["tv_between"] = r.tv_between;
  return j;
}

}  // namespace dpsubsel

#endif  // DPSUBSEL_SELECTION_HPP_
