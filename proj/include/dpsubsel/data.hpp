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

// Labeled datasets: synthetic generation, imbalance induction, the IDX digit
// corpus reader, and the little-endian binary cache / CSV exports.

#ifndef DPSUBSEL_DATA_HPP_
#define DPSUBSEL_DATA_HPP_

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "dpsubsel/error.hpp"
#include "dpsubsel/io.hpp"
#include "dpsubsel/rng.hpp"

namespace dpsubsel {

using FeatureMatrix =
    Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Index = std::int64_t;

enum class Role { kTrain, kVal, kTest };

inline const char* role_name(Role r) {
  switch (r) {
    case Role::kTrain: return "train";
    case Role::kVal: return "val";
    case Role::kTest: return "test";
  }
  return "?";
}

inline Role parse_role(const std::string& s) {
  if (s == "train") return Role::kTrain;
  if (s == "val") return Role::kVal;
  if (s == "test") return Role::kTest;
  throw ConfigError("unknown dataset role '" + s + "'");
}

// Immutable feature matrix + labels. Invariants are checked on construction.
class LabeledDataset {
 public:
  LabeledDataset(FeatureMatrix features, std::vector<int> labels,
                 int num_classes, Role role, std::string name)
      : features_(std::move(features)),
        labels_(std::move(labels)),
        num_classes_(num_classes),
        role_(role),
        name_(std::move(name)) {
    if (num_classes_ < 1) throw ConfigError("num_classes must be >= 1");
    if (features_.rows() != static_cast<Index>(labels_.size())) {
      throw ConfigError("dataset '" + name_ + "': " +
                        std::to_string(features_.rows()) + " rows but " +
                        std::to_string(labels_.size()) + " labels");
    }
    for (int y : labels_) {
      if (y < 0 || y >= num_classes_) {
        throw ConfigError("dataset '" + name_ + "': label " + std::to_string(y) +
                          " outside [0, " + std::to_string(num_classes_) + ")");
      }
    }
    if (!features_.allFinite()) {
      throw ConfigError("dataset '" + name_ + "': non-finite feature value");
    }
  }

  const FeatureMatrix& features() const { return features_; }
  const std::vector<int>& labels() const { return labels_; }
  int label(Index i) const { return labels_[static_cast<std::size_t>(i)]; }
  int num_classes() const { return num_classes_; }
  Role role() const { return role_; }
  const std::string& name() const { return name_; }
  Index size() const { return features_.rows(); }
  Index num_features() const { return features_.cols(); }

  std::vector<Index> class_counts() const {
    std::vector<Index> counts(static_cast<std::size_t>(num_classes_), 0);
    for (int y : labels_) ++counts[static_cast<std::size_t>(y)];
    return counts;
  }

  // Rows picked by `indices`, in that order.
  LabeledDataset select(std::span<const Index> indices, Role role,
                        std::string name) const {
    FeatureMatrix f(static_cast<Index>(indices.size()), features_.cols());
    std::vector<int> y(indices.size());
    for (std::size_t r = 0; r < indices.size(); ++r) {
      f.row(static_cast<Index>(r)) = features_.row(indices[r]);
      y[r] = labels_[static_cast<std::size_t>(indices[r])];
    }
    return LabeledDataset(std::move(f), std::move(y), num_classes_, role,
                          std::move(name));
  }

  bool operator==(const LabeledDataset& o) const {
    return num_classes_ == o.num_classes_ && role_ == o.role_ &&
           labels_ == o.labels_ && features_.rows() == o.features_.rows() &&
           features_.cols() == o.features_.cols() && features_ == o.features_;
  }

 private:
  FeatureMatrix features_;
  std::vector<int> labels_;
  int num_classes_;
  Role role_;
  std::string name_;
};

// Splits n into per-class counts by the largest-remainder rule, so every
// class is within one example of ratio * n.
inline std::vector<Index> allocate_counts(Index n, std::span<const double> ratios) {
  std::vector<Index> counts(ratios.size());
  std::vector<std::pair<double, std::size_t>> rem;
  Index assigned = 0;
  for (std::size_t c = 0; c < ratios.size(); ++c) {
    const double exact = ratios[c] * static_cast<double>(n);
    counts[c] = static_cast<Index>(std::floor(exact));
    assigned += counts[c];
    rem.emplace_back(exact - std::floor(exact), c);
  }
  std::stable_sort(rem.begin(), rem.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t i = 0; assigned < n; ++i, ++assigned) ++counts[rem[i].second];
  return counts;
}

struct SyntheticSpec {
  Index n_total = 5000;  // training split size
  Index n_val = 1000;
  Index n_test = 1000;
  Index n_features = 10;
  int num_classes = 2;
  std::vector<double> train_ratios{0.1, 0.9};
  std::vector<double> val_ratios{0.6, 0.4};
  std::vector<double> test_ratios{0.9, 0.1};
  std::uint64_t seed = 0;
  double separation = 2.0;

  void validate() const {
    if (n_features < 1) throw ConfigError("n_features must be >= 1");
    if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
    if (num_classes > 2 && n_features < num_classes) {
      throw ConfigError("more than two classes needs n_features >= num_classes");
    }
    if (n_total < 1 || n_val < 0 || n_test < 0) {
      throw ConfigError("split sizes must be positive");
    }
    if (!(separation >= 0.0) || !std::isfinite(separation)) {
      throw ConfigError("separation must be finite and >= 0");
    }
    auto check = [&](const std::vector<double>& r, const char* which) {
      if (r.size() != static_cast<std::size_t>(num_classes)) {
        throw ConfigError(std::string(which) + " ratios need one entry per class");
      }
      double sum = 0.0;
      for (double v : r) {
        if (!(v >= 0.0)) throw ConfigError(std::string(which) + " ratio negative");
        sum += v;
      }
      if (std::abs(sum - 1.0) > 1e-9) {
        throw ConfigError(std::string(which) + " ratios must sum to 1");
      }
    };
    check(train_ratios, "train");
    check(val_ratios, "val");
    check(test_ratios, "test");
  }
};

struct DatasetSplits {
  LabeledDataset train;
  LabeledDataset val;
  LabeledDataset test;
};

// Class means sit at pairwise distance `separation`: for two classes they are
// +-separation/2 along the unit diagonal, otherwise scaled basis vectors.
inline Eigen::VectorXd synthetic_class_mean(const SyntheticSpec& spec, int c) {
  Eigen::VectorXd mu = Eigen::VectorXd::Zero(spec.n_features);
  if (spec.num_classes == 2) {
    const double s = (c == 0 ? -0.5 : 0.5) * spec.separation /
                     std::sqrt(static_cast<double>(spec.n_features));
    mu.setConstant(s);
  } else {
    mu(c) = spec.separation / std::sqrt(2.0);
  }
  return mu;
}

inline DatasetSplits generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  std::vector<Eigen::VectorXd> means;
  for (int c = 0; c < spec.num_classes; ++c) means.push_back(synthetic_class_mean(spec, c));

  auto make = [&](Index n, const std::vector<double>& ratios, Role role,
                  std::uint64_t stream) {
    Rng rng(derive_seed(spec.seed, stream));
    const auto counts = allocate_counts(n, ratios);
    std::vector<int> labels;
    labels.reserve(static_cast<std::size_t>(n));
    for (int c = 0; c < spec.num_classes; ++c) {
      labels.insert(labels.end(), static_cast<std::size_t>(counts[static_cast<std::size_t>(c)]), c);
    }
    std::shuffle(labels.begin(), labels.end(), rng);
    FeatureMatrix f(n, spec.n_features);
    for (Index i = 0; i < n; ++i) {
      const auto& mu = means[static_cast<std::size_t>(labels[static_cast<std::size_t>(i)])];
      for (Index j = 0; j < spec.n_features; ++j) {
        f(i, j) = static_cast<float>(mu(j) + rng.normal());
      }
    }
    return LabeledDataset(std::move(f), std::move(labels), spec.num_classes,
                          role, std::string("synthetic-") + role_name(role));
  };
  return DatasetSplits{make(spec.n_total, spec.train_ratios, Role::kTrain, 1),
                       make(spec.n_val, spec.val_ratios, Role::kVal, 2),
                       make(spec.n_test, spec.test_ratios, Role::kTest, 3)};
}

struct ImbalanceSpec {
  std::map<int, double> per_class_keep;
  std::uint64_t seed = 0;

  void validate() const {
    for (const auto& [c, keep] : per_class_keep) {
      if (!(keep > 0.0 && keep <= 1.0)) {
        throw ConfigError("keep fraction for class " + std::to_string(c) +
                          " must lie in (0, 1]");
      }
    }
  }
};

// Keep fractions drawn uniformly from [lo, hi] per class.
inline ImbalanceSpec random_imbalance_spec(int num_classes, double lo, double hi,
                                           std::uint64_t seed) {
  ImbalanceSpec spec;
  spec.seed = seed;
  Rng rng(derive_seed(seed, 17));
  for (int c = 0; c < num_classes; ++c) spec.per_class_keep[c] = rng.uniform(lo, hi);
  return spec;
}

// Keeps floor(keep_c * count_c) examples of each class c, chosen uniformly
// without replacement; retained rows stay in their original relative order.
inline LabeledDataset induce_imbalance(const LabeledDataset& ds,
                                       const ImbalanceSpec& spec) {
  if (ds.role() != Role::kTrain) {
    throw ConfigError("imbalance can only be induced on a train split");
  }
  spec.validate();
  std::vector<std::vector<Index>> by_class(static_cast<std::size_t>(ds.num_classes()));
  for (Index i = 0; i < ds.size(); ++i) {
    by_class[static_cast<std::size_t>(ds.label(i))].push_back(i);
  }
  for (const auto& [c, keep] : spec.per_class_keep) {
    if (c < 0 || c >= ds.num_classes() || by_class[static_cast<std::size_t>(c)].empty()) {
      throw ConfigError("class " + std::to_string(c) + " not present in dataset '" +
                        ds.name() + "'");
    }
  }
  Rng rng(derive_seed(spec.seed, 23));
  std::vector<char> keep_row(static_cast<std::size_t>(ds.size()), 1);
  for (int c = 0; c < ds.num_classes(); ++c) {
    auto it = spec.per_class_keep.find(c);
    if (it == spec.per_class_keep.end()) continue;
    auto members = by_class[static_cast<std::size_t>(c)];
    const auto n = static_cast<Index>(members.size());
    const auto kept = static_cast<Index>(std::floor(it->second * static_cast<double>(n)));
    // Partial Fisher-Yates: the first `kept` slots are the retained sample.
    for (Index i = 0; i < kept; ++i) {
      const auto j = i + static_cast<Index>(rng.below(static_cast<std::uint64_t>(n - i)));
      std::swap(members[static_cast<std::size_t>(i)], members[static_cast<std::size_t>(j)]);
    }
    for (Index i = kept; i < n; ++i) keep_row[static_cast<std::size_t>(members[static_cast<std::size_t>(i)])] = 0;
  }
  std::vector<Index> rows;
  for (Index i = 0; i < ds.size(); ++i) {
    if (keep_row[static_cast<std::size_t>(i)]) rows.push_back(i);
  }
  return ds.select(rows, ds.role(), ds.name() + "-imbalanced");
}

// ---- IDX digit corpus -----------------------------------------------------

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

struct IdxImages {
  Index count = 0;
  Index rows = 0;
  Index cols = 0;
  std::vector<unsigned char> pixels;
};

inline IdxImages read_idx_images(const std::filesystem::path& path) {
  const auto data = io::read_file(path);
  io::ByteReader r(data);
  const auto magic = r.u32_be("magic number");
  if (magic != kIdxImageMagic) {
    throw FormatError(path.filename().string() + ": bad IDX image magic", 0);
  }
  IdxImages out;
  out.count = r.u32_be("image count");
  out.rows = r.u32_be("row count");
  out.cols = r.u32_be("column count");
  const auto n = static_cast<std::uint64_t>(out.count * out.rows * out.cols);
  const auto* p = r.raw(n, "pixel data");
  out.pixels.assign(p, p + n);
  return out;
}

inline std::vector<int> read_idx_labels(const std::filesystem::path& path) {
  const auto data = io::read_file(path);
  io::ByteReader r(data);
  const auto magic = r.u32_be("magic number");
  if (magic != kIdxLabelMagic) {
    throw FormatError(path.filename().string() + ": bad IDX label magic", 0);
  }
  const auto n = r.u32_be("label count");
  const auto* p = r.raw(n, "label data");
  return std::vector<int>(p, p + n);
}

inline LabeledDataset idx_to_dataset(const IdxImages& img, std::vector<int> labels,
                                     Role role, std::string name) {
  if (static_cast<Index>(labels.size()) != img.count) {
    throw FormatError(name + ": image and label counts differ", 4);
  }
  const Index dim = img.rows * img.cols;
  FeatureMatrix f(img.count, dim);
  for (Index i = 0; i < img.count; ++i) {
    for (Index j = 0; j < dim; ++j) {
      f(i, j) = static_cast<float>(img.pixels[static_cast<std::size_t>(i * dim + j)]) / 255.0f;
    }
  }
  int num_classes = 1 + *std::max_element(labels.begin(), labels.end());
  num_classes = std::max(num_classes, 10);
  return LabeledDataset(std::move(f), std::move(labels), num_classes, role,
                        std::move(name));
}

// Loads the four standard IDX files under `dir`. The validation split is the
// tail `val_size` rows of the seeded shuffle of the training file.
inline DatasetSplits load_idx_digits(const std::filesystem::path& dir,
                                     Index val_size = 5000, std::uint64_t seed = 0) {
  const auto train_img = read_idx_images(dir / "train-images-idx3-ubyte");
  auto train_lbl = read_idx_labels(dir / "train-labels-idx1-ubyte");
  const auto test_img = read_idx_images(dir / "t10k-images-idx3-ubyte");
  auto test_lbl = read_idx_labels(dir / "t10k-labels-idx1-ubyte");
  auto full = idx_to_dataset(train_img, std::move(train_lbl), Role::kTrain, "digits-train-full");
  auto test = idx_to_dataset(test_img, std::move(test_lbl), Role::kTest, "digits-test");
  if (val_size < 0 || val_size >= full.size()) {
    throw ConfigError("validation size must lie in [0, " + std::to_string(full.size()) + ")");
  }
  std::vector<Index> order(static_cast<std::size_t>(full.size()));
  std::iota(order.begin(), order.end(), Index{0});
  Rng rng(derive_seed(seed, 31));
  std::shuffle(order.begin(), order.end(), rng);
  const auto cut = static_cast<std::size_t>(full.size() - val_size);
  std::span<const Index> all(order);
  return DatasetSplits{full.select(all.subspan(0, cut), Role::kTrain, "digits-train"),
                       full.select(all.subspan(cut), Role::kVal, "digits-val"),
                       std::move(test)};
}

// ---- binary cache and CSV --------------------------------------------------
//
// Cache layout (little-endian): u32 n_rows, u32 n_cols, u32 n_classes, then
// n_rows * n_cols f32 features row-major, then n_rows i32 labels.

inline std::string encode_binary(const LabeledDataset& ds) {
  io::ByteWriter w;
  w.u32_le(static_cast<std::uint32_t>(ds.size()));
  w.u32_le(static_cast<std::uint32_t>(ds.num_features()));
  w.u32_le(static_cast<std::uint32_t>(ds.num_classes()));
  const auto& f = ds.features();
  for (Index i = 0; i < f.rows(); ++i) {
    for (Index j = 0; j < f.cols(); ++j) w.f32_le(f(i, j));
  }
  for (int y : ds.labels()) w.i32_le(y);
  return w.str();
}

inline void save_binary(const LabeledDataset& ds, const std::filesystem::path& path) {
  io::write_file_atomic(path, encode_binary(ds));
}

inline LabeledDataset load_binary(const std::filesystem::path& path, Role role,
                                  std::string name = {}) {
  const auto data = io::read_file(path);
  io::ByteReader r(data);
  const Index rows = r.u32_le("n_rows");
  const Index cols = r.u32_le("n_cols");
  const int classes = static_cast<int>(r.u32_le("n_classes"));
  r.need(static_cast<std::uint64_t>(rows * cols) * 4, "features");
  FeatureMatrix f(rows, cols);
  for (Index i = 0; i < rows; ++i) {
    for (Index j = 0; j < cols; ++j) f(i, j) = r.f32_le("features");
  }
  r.need(static_cast<std::uint64_t>(rows) * 4, "labels");
  std::vector<int> labels(static_cast<std::size_t>(rows));
  for (auto& y : labels) y = r.i32_le("labels");
  if (r.remaining() != 0) throw FormatError("trailing bytes after labels", r.offset());
  if (name.empty()) name = path.stem().string();
  return LabeledDataset(std::move(f), std::move(labels), classes, role, std::move(name));
}

// Header `label,f0,...,f{m-1}`.
inline std::string to_csv(const LabeledDataset& ds) {
  std::string out = "label";
  for (Index j = 0; j < ds.num_features(); ++j) out += ",f" + std::to_string(j);
  out += '\n';
  const auto& f = ds.features();
  for (Index i = 0; i < ds.size(); ++i) {
    out += std::to_string(ds.label(i));
    for (Index j = 0; j < f.cols(); ++j) {
      out += ',';
      out += io::fmt_float(f(i, j));
    }
    out += '\n';
  }
  return out;
}

inline void save_csv(const LabeledDataset& ds, const std::filesystem::path& path) {
  io::write_file_atomic(path, to_csv(ds));
}

}  // namespace dpsubsel

#endif  // DPSUBSEL_DATA_HPP_
