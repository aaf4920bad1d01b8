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

// Differential-privacy primitives: Gaussian gradient perturbation, the
// exponential mechanism, a Renyi-DP accountant for the Poisson-subsampled
// Gaussian mechanism with noise calibration, and the budget ledger.

#ifndef DPSUBSEL_PRIVACY_HPP_
#define DPSUBSEL_PRIVACY_HPP_

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstdint>
#include <limits>
#include <mutex>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "dpsubsel/error.hpp"
#include "dpsubsel/io.hpp"
#include "dpsubsel/model.hpp"
#include "dpsubsel/rng.hpp"
#include "json.hpp"

namespace dpsubsel {

// ---- budget -----------------------------------------------------------------

struct PrivacyBudget {
  double epsilon_total = 3.0;
  double delta = 1e-5;
  double alloc_ratio = 0.9;  // fraction of epsilon given to training
  // Fraction of delta reserved for subset selection. Zero unless advanced
  // composition is used for the exponential-mechanism steps.
  double selection_delta_share = 0.0;

  double eps_train() const { return alloc_ratio * epsilon_total; }
  // Defined by subtraction so eps_train() + eps_selection() == epsilon_total.
  double eps_selection() const { return epsilon_total - eps_train(); }
  double delta_selection() const { return delta * selection_delta_share; }
  double delta_train() const { return delta - delta_selection(); }

  void validate() const {
    if (!(epsilon_total > 0.0) || !std::isfinite(epsilon_total)) {
      throw ConfigError("epsilon_total must be finite and > 0");
    }
    if (!(delta > 0.0 && delta < 1.0)) throw ConfigError("delta must lie in (0, 1)");
    if (!(alloc_ratio >= 0.0 && alloc_ratio <= 1.0)) {
      throw ConfigError("allocation ratio must lie in [0, 1]");
    }
    if (!(selection_delta_share >= 0.0 && selection_delta_share < 1.0)) {
      throw ConfigError("selection_delta_share must lie in [0, 1)");
    }
  }
};

enum class Phase { kTrain, kSelection };

inline const char* phase_name(Phase p) { return p == Phase::kTrain ? "train" : "selection"; }

struct SpendRecord {
  std::string mechanism;
  double eps = 0.0;
  double delta = 0.0;
  Phase phase = Phase::kTrain;
  std::int64_t step = 0;
};

// Append-only record of privacy spends under basic composition. Every spend
// is checked against its phase cap and the total before it is recorded.
class PrivacyLedger {
 public:
  static constexpr double kSlack = 1e-12;

  explicit PrivacyLedger(PrivacyBudget budget) : budget_(budget) { budget_.validate(); }

  PrivacyLedger(const PrivacyLedger& o) : budget_(o.budget_), records_(o.snapshot()) {}

  const PrivacyBudget& budget() const { return budget_; }

  double eps_cap(Phase p) const {
    return p == Phase::kTrain ? budget_.eps_train() : budget_.eps_selection();
  }
  double delta_cap(Phase p) const {
    return p == Phase::kTrain ? budget_.delta_train() : budget_.delta_selection();
  }

  void spend(const std::string& mechanism, double eps, double delta, Phase phase,
             std::int64_t step) {
    if (!(eps >= 0.0) || !(delta >= 0.0)) {
      throw DomainError("privacy spends must be nonnegative");
    }
    std::lock_guard<std::mutex> lock(mu_);
    const double phase_eps = sum_eps(phase) + eps;
    const double phase_delta = sum_delta(phase) + delta;
    const double tot_eps = sum_eps(Phase::kTrain) + sum_eps(Phase::kSelection) + eps;
    const double tot_delta = sum_delta(Phase::kTrain) + sum_delta(Phase::kSelection) + delta;
    const double rem_eps = std::max(0.0, eps_cap(phase) - sum_eps(phase));
    const double rem_delta = std::max(0.0, delta_cap(phase) - sum_delta(phase));
    if (phase_eps > eps_cap(phase) + kSlack || tot_eps > budget_.epsilon_total + kSlack) {
      throw BudgetExceeded(std::string("epsilon spend of ") + io::fmt_double(eps) + " by " +
                               mechanism + " exceeds the " + phase_name(phase) +
                               " budget (remaining " + io::fmt_double(rem_eps) + ")",
                           rem_eps, rem_delta);
    }
    if (phase_delta > delta_cap(phase) + kSlack || tot_delta > budget_.delta + kSlack) {
      throw BudgetExceeded(std::string("delta spend of ") + io::fmt_double(delta) + " by " +
                               mechanism + " exceeds the " + phase_name(phase) +
                               " budget (remaining " + io::fmt_double(rem_delta) + ")",
                           rem_eps, rem_delta);
    }
    records_.push_back({mechanism, eps, delta, phase, step});
  }

  double spent_eps(Phase p) const {
    std::lock_guard<std::mutex> lock(mu_);
    return sum_eps(p);
  }
  double spent_delta(Phase p) const {
    std::lock_guard<std::mutex> lock(mu_);
    return sum_delta(p);
  }
  double spent_eps_total() const { return spent_eps(Phase::kTrain) + spent_eps(Phase::kSelection); }
  double spent_delta_total() const {
    return spent_delta(Phase::kTrain) + spent_delta(Phase::kSelection);
  }
  double remaining_eps(Phase p) const { return std::max(0.0, eps_cap(p) - spent_eps(p)); }

  std::vector<SpendRecord> snapshot() const {
    std::lock_guard<std::mutex> lock(mu_);
    return records_;
  }

  std::string to_jsonl() const;

 private:
  double sum_eps(Phase p) const {
    double s = 0.0;
    for (const auto& r : records_) {
      if (r.phase == p) s += r.eps;
    }
    return s;
  }
  double sum_delta(Phase p) const {
    double s = 0.0;
    for (const auto& r : records_) {
      if (r.phase == p) s += r.delta;
    }
    return s;
  }

  PrivacyBudget budget_;
  std::vector<SpendRecord> records_;
  mutable std::mutex mu_;
};

// One JSON object per line: {mechanism, eps, delta, phase, step}.
inline std::string ledger_to_jsonl(const std::vector<SpendRecord>& records) {
  std::string out;
  for (const auto& r : records) {
    nlohmann::ordered_json j;
    j["mechanism"] = r.mechanism;
    j["eps"] = r.eps;
    j["delta"] = r.delta;
    j["phase"] = phase_name(r.phase);
    j["step"] = r.step;
    out += j.dump();
    out += '\n';
  }
  return out;
}

inline std::string PrivacyLedger::to_jsonl() const { return ledger_to_jsonl(snapshot()); }

// ---- Gaussian mechanism on gradients ---------------------------------------

// Below this noise multiplier the guarantee is considered practically vacuous.
inline constexpr double kPrivacyWallSigma = 0.5;

struct GaussianMechanismParams {
  double clip_norm = 1.0;
  double noise_multiplier = 1.0;
  double sampling_rate = 0.01;
  std::int64_t steps = 1;

  bool below_privacy_wall(double floor = kPrivacyWallSigma) const {
    return noise_multiplier < floor;
  }
};

// Adds N(0, (sigma * clip)^2) to each coordinate of `sum` in place.
inline void add_gaussian_noise(Eigen::VectorXd& sum, double clip, double sigma, Rng& rng) {
  if (sigma <= 0.0) return;
  const double sd = sigma * clip;
  for (Index i = 0; i < sum.size(); ++i) sum(i) += sd * rng.normal();
}

// Clips each row to L2 norm <= clip, sums, adds Gaussian noise with
// per-coordinate standard deviation sigma * clip and divides by the nominal
// (expected) lot size.
inline Eigen::VectorXd clip_and_noise(const RowMatrix& per_sample, double clip, double sigma,
                                      double nominal_batch, Rng& rng) {
  if (!(clip > 0.0)) throw DomainError("clip norm must be > 0");
  if (!(sigma >= 0.0)) throw DomainError("noise multiplier must be >= 0");
  if (!(nominal_batch > 0.0)) throw DomainError("nominal batch size must be > 0");
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(per_sample.cols());
  for (Index r = 0; r < per_sample.rows(); ++r) {
    const double norm = per_sample.row(r).norm();
    const double scale = norm > clip ? clip / norm : 1.0;
    assert(norm * scale <= clip * (1.0 + 1e-12));
    sum += scale * per_sample.row(r).transpose();
  }
  add_gaussian_noise(sum, clip, sigma, rng);
  return sum / nominal_batch;
}

inline Eigen::VectorXd clip_and_noise(const PerSampleGrads& g, double clip, double sigma,
                                      double nominal_batch, Rng& rng) {
  return clip_and_noise(g.grads, clip, sigma, nominal_batch, rng);
}

// ---- exponential mechanism --------------------------------------------------

namespace detail {

inline void check_em_args(std::span<const double> u, double eps0, double sensitivity) {
  if (u.empty()) throw DomainError("exponential mechanism over an empty utility vector");
  if (!(eps0 > 0.0)) throw DomainError("exponential mechanism epsilon must be > 0");
  if (!(sensitivity > 0.0) || !std::isfinite(sensitivity)) {
    throw DomainError("utility sensitivity must be finite and > 0");
  }
  for (double v : u) {
    if (!std::isfinite(v)) throw DomainError("utilities must be finite");
  }
}

inline std::size_t argmax_lowest(std::span<const double> u) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < u.size(); ++i) {
    if (u[i] > u[best]) best = i;
  }
  return best;
}

}  // namespace detail

// Exact probabilities softmax(eps0 * u / (2 * sensitivity)). An infinite
// eps0 gives the uniform distribution over the maximizers.
inline std::vector<double> sampling_distribution(std::span<const double> u, double eps0,
                                                 double sensitivity) {
  detail::check_em_args(u, eps0, sensitivity);
  std::vector<double> p(u.size());
  if (std::isinf(eps0)) {
    const double mx = *std::max_element(u.begin(), u.end());
    const auto ties = std::count(u.begin(), u.end(), mx);
    for (std::size_t i = 0; i < u.size(); ++i) {
      p[i] = u[i] == mx ? 1.0 / static_cast<double>(ties) : 0.0;
    }
    return p;
  }
  const double scale = eps0 / (2.0 * sensitivity);
  double mx = -std::numeric_limits<double>::infinity();
  for (double v : u) mx = std::max(mx, scale * v);
  double z = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    p[i] = std::exp(scale * u[i] - mx);
    z += p[i];
  }
  for (double& v : p) v /= z;
  return p;
}

// Draws index i with probability proportional to exp(eps0 * u_i / (2 * sens))
// using the Gumbel-max trick. An infinite eps0 returns the lowest-index argmax.
inline std::size_t exp_mechanism_sample(std::span<const double> u, double eps0,
                                        double sensitivity, Rng& rng) {
  detail::check_em_args(u, eps0, sensitivity);
  if (std::isinf(eps0)) return detail::argmax_lowest(u);
  const double scale = eps0 / (2.0 * sensitivity);
  std::size_t best = 0;
  double best_key = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < u.size(); ++i) {
    const double key = scale * u[i] + rng.gumbel();
    if (key > best_key) {
      best_key = key;
      best = i;
    }
  }
  return best;
}

// Inverse-CDF sampling from sampling_distribution; a second route to the
// same distribution as exp_mechanism_sample.
inline std::size_t exp_mechanism_sample_direct(std::span<const double> u, double eps0,
                                               double sensitivity, Rng& rng) {
  const auto p = sampling_distribution(u, eps0, sensitivity);
  const double r = rng.uniform_open();
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    acc += p[i];
    if (r < acc) return i;
  }
  return p.size() - 1;
}

inline double total_variation(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw DomainError("total variation of mismatched lengths");
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) s += std::abs(p[i] - q[i]);
  return 0.5 * s;
}

inline double tv_to_uniform(std::span<const double> p) {
  const double u = 1.0 / static_cast<double>(p.size());
  double s = 0.0;
  for (double v : p) s += std::abs(v - u);
  return 0.5 * s;
}

// Largest per-step epsilon whose k-fold advanced composition,
// sqrt(2 k ln(1/delta')) e + k e (exp(e) - 1), stays within eps_total.
inline double advanced_composition_step_eps(double eps_total, std::int64_t k,
                                            double delta_prime) {
  if (k < 1 || !(eps_total > 0.0) || !(delta_prime > 0.0 && delta_prime < 1.0)) {
    throw DomainError("advanced composition needs k >= 1, eps > 0, delta' in (0,1)");
  }
  const auto kd = static_cast<double>(k);
  auto composed = [&](double e) {
    return std::sqrt(2.0 * kd * std::log(1.0 / delta_prime)) * e + kd * e * std::expm1(e);
  };
  double lo = 0.0;
  double hi = eps_total;
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    (composed(mid) <= eps_total ? lo : hi) = mid;
  }
  return std::max(lo, eps_total / kd);
}

// ---- Renyi DP accountant ----------------------------------------------------

struct RdpCurve {
  std::vector<double> orders;
  std::vector<double> values;
};

// Integer orders 2..256 plus a few fractional ones below 2.
inline std::vector<double> default_rdp_orders() {
  std::vector<double> o{1.25, 1.5, 1.75};
  for (int a = 2; a <= 256; ++a) o.push_back(a);
  return o;
}

namespace detail {

inline double log_add(double a, double b) {
  if (a == -std::numeric_limits<double>::infinity()) return b;
  if (b == -std::numeric_limits<double>::infinity()) return a;
  const double mx = std::max(a, b);
  return mx + std::log1p(std::exp(-std::abs(a - b)));
}

// log A_alpha for the Poisson-subsampled Gaussian at integer alpha:
//   A = sum_k C(alpha,k) (1-q)^(alpha-k) q^k exp((k^2 - k) / (2 sigma^2)).
inline double log_a_int(double q, double sigma, std::int64_t alpha) {
  double acc = -std::numeric_limits<double>::infinity();
  const double lq = std::log(q);
  const double l1q = std::log1p(-q);
  const double a = static_cast<double>(alpha);
  for (std::int64_t k = 0; k <= alpha; ++k) {
    const double kd = static_cast<double>(k);
    const double log_binom =
        std::lgamma(a + 1.0) - std::lgamma(kd + 1.0) - std::lgamma(a - kd + 1.0);
    const double term =
        log_binom + kd * lq + (a - kd) * l1q + (kd * kd - kd) / (2.0 * sigma * sigma);
    acc = log_add(acc, term);
  }
  return acc;
}

}  // namespace detail

// RDP of `steps` compositions of the Poisson-subsampled Gaussian mechanism.
// q == 1 uses the exact alpha / (2 sigma^2); otherwise integer orders use the
// binomial expansion and fractional orders are bounded by the next integer
// order (RDP is nondecreasing in alpha).
inline RdpCurve rdp_subsampled_gaussian(double q, double sigma, std::int64_t steps,
                                        std::vector<double> orders = default_rdp_orders()) {
  if (!(q > 0.0 && q <= 1.0)) throw DomainError("sampling rate must lie in (0, 1]");
  if (!(sigma > 0.0)) throw DomainError("noise multiplier must be > 0");
  if (steps < 0) throw DomainError("step count must be >= 0");
  RdpCurve c{std::move(orders), {}};
  c.values.reserve(c.orders.size());
  const auto t = static_cast<double>(steps);
  for (double alpha : c.orders) {
    if (!(alpha > 1.0)) throw DomainError("RDP orders must exceed 1");
    double per_step;
    if (q == 1.0) {
      per_step = alpha / (2.0 * sigma * sigma);
    } else {
      const auto ai = static_cast<std::int64_t>(std::ceil(alpha));
      per_step = std::max(0.0, detail::log_a_int(q, sigma, std::max<std::int64_t>(ai, 2)) /
                                   (static_cast<double>(std::max<std::int64_t>(ai, 2)) - 1.0));
    }
    c.values.push_back(t * per_step);
  }
  return c;
}

struct EpsAtOrder {
  double eps = 0.0;
  double order = 0.0;
};

// eps = min over alpha of RDP(alpha) + log(1/delta) / (alpha - 1).
inline EpsAtOrder rdp_to_eps_with_order(const RdpCurve& curve, double delta) {
  if (curve.orders.empty() || curve.orders.size() != curve.values.size()) {
    throw DomainError("RDP curve is empty or malformed");
  }
  if (!(delta > 0.0 && delta < 1.0)) throw DomainError("delta must lie in (0, 1)");
  EpsAtOrder best{std::numeric_limits<double>::infinity(), 0.0};
  for (std::size_t i = 0; i < curve.orders.size(); ++i) {
    const double e = curve.values[i] + std::log(1.0 / delta) / (curve.orders[i] - 1.0);
    if (e < best.eps) best = {e, curve.orders[i]};
  }
  return best;
}

inline double rdp_to_eps(const RdpCurve& curve, double delta) {
  return rdp_to_eps_with_order(curve, delta).eps;
}

inline double dp_sgd_epsilon(double q, double sigma, std::int64_t steps, double delta) {
  return rdp_to_eps(rdp_subsampled_gaussian(q, sigma, steps), delta);
}

// Relative window below the target at which sigma calibration stops.
inline constexpr double kCalibrationWindow = 1e-5;

// Smallest noise multiplier (up to the search tolerance) in [sigma_lo,
// sigma_hi] whose accounted epsilon lies in [1 - kCalibrationWindow, 1] * target_eps.
inline double calibrate_sigma(double target_eps, double delta, double q, std::int64_t steps,
                              double sigma_lo = 0.5, double sigma_hi = 1000.0) {
  if (!(target_eps > 0.0)) throw DomainError("target epsilon must be > 0");
  auto eps_at = [&](double s) { return dp_sgd_epsilon(q, s, steps, delta); };
  const double e_lo = eps_at(sigma_lo);
  const double e_hi = eps_at(sigma_hi);
  if (e_hi > target_eps) {
    throw CalibrationError("epsilon " + io::fmt_double(target_eps) +
                               " unreachable: even sigma " + io::fmt_double(sigma_hi) +
                               " gives " + io::fmt_double(e_hi) + " (bracket [" +
                               io::fmt_double(sigma_lo) + ", " + io::fmt_double(sigma_hi) + "])",
                           sigma_lo, sigma_hi);
  }
  if (e_lo <= target_eps) {
    if (e_lo >= (1.0 - kCalibrationWindow) * target_eps) return sigma_lo;
    throw CalibrationError("epsilon " + io::fmt_double(target_eps) +
                               " needs noise below the bracket floor: sigma " +
                               io::fmt_double(sigma_lo) + " already gives " +
                               io::fmt_double(e_lo) + " (bracket [" + io::fmt_double(sigma_lo) +
                               ", " + io::fmt_double(sigma_hi) + "])",
                           sigma_lo, sigma_hi);
  }
  // Invariant: eps(lo) > target >= eps(hi), with eps decreasing in sigma.
  double lo = sigma_lo;
  double hi = sigma_hi;
  double e_lo_cur = e_lo;
  double e = e_hi;
  for (int it = 0; it < 200 && e < (1.0 - kCalibrationWindow) * target_eps; ++it) {
    const double mid = 0.5 * (lo + hi);
    const double em = eps_at(mid);
    const double tol = 1e-9 * target_eps;
    if (em > e_lo_cur + tol || em < e - tol) {
      throw CalibrationError("accounted epsilon is not monotone in sigma", lo, hi);
    }
    if (em > target_eps) {
      lo = mid;
      e_lo_cur = em;
    } else {
      hi = mid;
      e = em;
    }
  }
  return hi;
}

}  // namespace dpsubsel

#endif  // DPSUBSEL_PRIVACY_HPP_
