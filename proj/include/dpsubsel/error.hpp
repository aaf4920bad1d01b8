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

#ifndef DPSUBSEL_ERROR_HPP_
#define DPSUBSEL_ERROR_HPP_

#include <cstdint>
#include <stdexcept>
#include <string>

namespace dpsubsel {

// Invalid or inconsistent configuration (ratios, budgets, missing classes).
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Precondition violations on numeric inputs (empty sets, k > n, ...).
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// Malformed on-disk data. Carries the byte offset at which parsing failed.
class FormatError : public std::runtime_error {
 public:
  FormatError(const std::string& what, std::uint64_t offset)
      : std::runtime_error(what + " (at byte offset " + std::to_string(offset) +
                           ")"),
        offset_(offset) {}

  std::uint64_t offset() const { return offset_; }

 private:
  std::uint64_t offset_;
};

// The noise calibration search could not reach the requested epsilon.
class CalibrationError : public std::runtime_error {
 public:
  CalibrationError(const std::string& what, double sigma_lo, double sigma_hi)
      : std::runtime_error(what), sigma_lo_(sigma_lo), sigma_hi_(sigma_hi) {}

  double sigma_lo() const { return sigma_lo_; }
  double sigma_hi() const { return sigma_hi_; }

 private:
  double sigma_lo_;
  double sigma_hi_;
};

// A ledger spend was refused. Carries what was left in the relevant bound.
class BudgetExceeded : public std::runtime_error {
 public:
  BudgetExceeded(const std::string& what, double remaining_eps,
                 double remaining_delta)
      : std::runtime_error(what),
        remaining_eps_(remaining_eps),
        remaining_delta_(remaining_delta) {}

  double remaining_eps() const { return remaining_eps_; }
  double remaining_delta() const { return remaining_delta_; }

 private:
  double remaining_eps_;
  double remaining_delta_;
};

}  // namespace dpsubsel

#endif  // DPSUBSEL_ERROR_HPP_
