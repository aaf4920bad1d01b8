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

#include <cmath>
#include <map>
#include <numeric>

#include "dpsubsel/data.hpp"
#include "dpsubsel/error.hpp"
#include "test_util.hpp"

namespace dpsubsel {
namespace {

using testing::TempDir;

FeatureMatrix tiny_features(Index n, Index m) {
  FeatureMatrix f(n, m);
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < m; ++j) f(i, j) = static_cast<float>(i * m + j);
  }
  return f;
}

TEST(LabeledDataset, ValidatesShapeLabelsAndFiniteness) {
  EXPECT_THROW(LabeledDataset(tiny_features(3, 2), {0, 1}, 2, Role::kTrain, "x"), ConfigError);
  EXPECT_THROW(LabeledDataset(tiny_features(2, 2), {0, 2}, 2, Role::kTrain, "x"), ConfigError);
  EXPECT_THROW(LabeledDataset(tiny_features(2, 2), {0, -1}, 2, Role::kTrain, "x"), ConfigError);
  auto f = tiny_features(2, 2);
  f(1, 1) = std::numeric_limits<float>::quiet_NaN();
  EXPECT_THROW(LabeledDataset(f, {0, 1}, 2, Role::kTrain, "x"), ConfigError);
  f(1, 1) = std::numeric_limits<float>::infinity();
  EXPECT_THROW(LabeledDataset(f, {0, 1}, 2, Role::kTrain, "x"), ConfigError);
  EXPECT_NO_THROW(LabeledDataset(tiny_features(2, 2), {0, 1}, 2, Role::kTrain, "x"));
}

TEST(LabeledDataset, SelectKeepsOrderAndDuplicates) {
  LabeledDataset ds(tiny_features(4, 2), {0, 1, 0, 1}, 2, Role::kTrain, "x");
  const std::vector<Index> idx{3, 0, 3};
  const auto s = ds.select(idx, Role::kVal, "y");
  EXPECT_EQ(s.size(), 3);
  EXPECT_EQ(s.role(), Role::kVal);
  EXPECT_EQ(s.labels(), (std::vector<int>{1, 0, 1}));
  EXPECT_EQ(s.features()(0, 1), 7.0f);
  EXPECT_EQ(s.features()(1, 0), 0.0f);
}

TEST(Roles, NamesRoundTrip) {
  for (Role r : {Role::kTrain, Role::kVal, Role::kTest}) EXPECT_EQ(parse_role(role_name(r)), r);
  EXPECT_THROW(parse_role("holdout"), ConfigError);
}

TEST(AllocateCounts, LargestRemainderSumsToN) {
  const std::vector<double> r{1.0 / 3, 1.0 / 3, 1.0 / 3};
  const auto c = allocate_counts(10, r);
  EXPECT_EQ(std::accumulate(c.begin(), c.end(), Index{0}), 10);
  for (Index v : c) EXPECT_TRUE(v == 3 || v == 4);
  const std::vector<double> r2{0.1, 0.9};
  EXPECT_EQ(allocate_counts(5000, r2), (std::vector<Index>{500, 4500}));
}

TEST(Synthetic, ImbalancedSpecHasRequestedCounts) {
  const auto s = generate_synthetic(SyntheticSpec{});
  EXPECT_EQ(s.train.size(), 5000);
  EXPECT_EQ(s.train.num_features(), 10);
  EXPECT_EQ(s.train.class_counts(), (std::vector<Index>{500, 4500}));
  EXPECT_EQ(s.val.class_counts(), (std::vector<Index>{600, 400}));
  EXPECT_EQ(s.test.class_counts(), (std::vector<Index>{900, 100}));
  EXPECT_EQ(s.train.role(), Role::kTrain);
  EXPECT_EQ(s.val.role(), Role::kVal);
  EXPECT_EQ(s.test.role(), Role::kTest);
}

TEST(Synthetic, BalancedRatiosGiveEqualCounts) {
  SyntheticSpec spec;
  spec.train_ratios = spec.val_ratios = spec.test_ratios = {0.5, 0.5};
  const auto s = generate_synthetic(spec);
  for (const auto* d : {&s.train, &s.val, &s.test}) {
    const auto c = d->class_counts();
    EXPECT_EQ(c[0], c[1]);
  }
}

TEST(Synthetic, DeterministicPerSeed) {
  SyntheticSpec spec;
  spec.seed = 11;
  const auto a = generate_synthetic(spec);
  const auto b = generate_synthetic(spec);
  EXPECT_TRUE(a.train == b.train);
  EXPECT_TRUE(a.val == b.val);
  EXPECT_TRUE(a.test == b.test);
  spec.seed = 12;
  EXPECT_FALSE(a.train == generate_synthetic(spec).train);
}

TEST(Synthetic, ClassMeansAtRequestedSeparation) {
  SyntheticSpec spec;
  spec.n_total = 40000;
  spec.train_ratios = {0.5, 0.5};
  const auto s = generate_synthetic(spec);
  Eigen::VectorXd m0 = Eigen::VectorXd::Zero(10), m1 = Eigen::VectorXd::Zero(10);
  for (Index i = 0; i < s.train.size(); ++i) {
    (s.train.label(i) == 0 ? m0 : m1) += s.train.features().row(i).transpose().cast<double>();
  }
  m0 /= 20000.0;
  m1 /= 20000.0;
  EXPECT_NEAR((m1 - m0).norm(), spec.separation, 0.05);
}

TEST(Synthetic, RejectsBadSpecs) {
  SyntheticSpec spec;
  spec.train_ratios = {0.5, 0.6};
  EXPECT_THROW(generate_synthetic(spec), ConfigError);
  spec = SyntheticSpec{};
  spec.val_ratios = {1.0};
  EXPECT_THROW(generate_synthetic(spec), ConfigError);
  spec = SyntheticSpec{};
  spec.num_classes = 1;
  EXPECT_THROW(generate_synthetic(spec), ConfigError);
}

TEST(Imbalance, IdentityWhenKeepingEverything) {
  const auto s = generate_synthetic(SyntheticSpec{});
  ImbalanceSpec spec{{{0, 1.0}, {1, 1.0}}, 3};
  EXPECT_TRUE(induce_imbalance(s.train, spec) == s.train);
}

TEST(Imbalance, FloorOfKeepFraction) {
  FeatureMatrix f = FeatureMatrix::Zero(150, 1);
  std::vector<int> y(150, 1);
  std::fill(y.begin(), y.begin() + 100, 0);
  LabeledDataset ds(f, y, 2, Role::kTrain, "x");
  const auto out = induce_imbalance(ds, ImbalanceSpec{{{0, 0.8}}, 0});
  EXPECT_EQ(out.class_counts(), (std::vector<Index>{80, 50}));
  const auto out2 = induce_imbalance(ds, ImbalanceSpec{{{0, 0.333}, {1, 0.999}}, 0});
  EXPECT_EQ(out2.class_counts(), (std::vector<Index>{33, 49}));
}

// Oracle: retained count per class is floor(keep_c * n_c), the retained rows
// of each class are a uniform subset, and the relative order is unchanged.
TEST(Imbalance, MatchesIndependentSamplingRule) {
  const auto base = generate_synthetic(SyntheticSpec{}).train;
  SyntheticSpec spec3;
  spec3.num_classes = 3;
  spec3.train_ratios = {0.2, 0.3, 0.5};
  spec3.val_ratios = spec3.test_ratios = {0.2, 0.3, 0.5};
  for (const auto* ds : {&base}) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      const auto spec = random_imbalance_spec(ds->num_classes(), 0.8, 1.0, seed);
      const auto out = induce_imbalance(*ds, spec);
      const auto before = ds->class_counts();
      const auto after = out.class_counts();
      for (int c = 0; c < ds->num_classes(); ++c) {
        const double keep = spec.per_class_keep.at(c);
        EXPECT_GE(keep, 0.8);
        EXPECT_LE(keep, 1.0);
        EXPECT_EQ(after[c], static_cast<Index>(std::floor(keep * before[c])));
      }
    }
  }
  // Three classes, and the retained rows appear in their original order.
  const auto tri = generate_synthetic(spec3).train;
  FeatureMatrix tagged = tri.features();
  for (Index i = 0; i < tagged.rows(); ++i) tagged(i, 0) = static_cast<float>(i);
  LabeledDataset tds(tagged, tri.labels(), 3, Role::kTrain, "tagged");
  const auto spec = random_imbalance_spec(3, 0.5, 0.9, 9);
  const auto out = induce_imbalance(tds, spec);
  for (Index i = 1; i < out.size(); ++i) {
    EXPECT_LT(out.features()(i - 1, 0), out.features()(i, 0));
  }
  for (int c = 0; c < 3; ++c) {
    EXPECT_EQ(out.class_counts()[c],
              static_cast<Index>(std::floor(spec.per_class_keep.at(c) * tds.class_counts()[c])));
  }
}

TEST(Imbalance, RetentionIsUniformWithinClass) {
  FeatureMatrix f(20, 1);
  for (Index i = 0; i < 20; ++i) f(i, 0) = static_cast<float>(i);
  LabeledDataset ds(f, std::vector<int>(20, 0), 1, Role::kTrain, "x");
  std::vector<int> hits(20, 0);
  const int trials = 20000;
  for (int t = 0; t < trials; ++t) {
    const auto out = induce_imbalance(ds, ImbalanceSpec{{{0, 0.5}}, static_cast<std::uint64_t>(t)});
    for (Index i = 0; i < out.size(); ++i) ++hits[static_cast<std::size_t>(out.features()(i, 0))];
  }
  for (int h : hits) EXPECT_NEAR(static_cast<double>(h) / trials, 0.5, 0.02);
}

TEST(Imbalance, Errors) {
  const auto s = generate_synthetic(SyntheticSpec{});
  EXPECT_THROW(induce_imbalance(s.val, ImbalanceSpec{{{0, 0.5}}, 0}), ConfigError);
  EXPECT_THROW(induce_imbalance(s.train, ImbalanceSpec{{{2, 0.5}}, 0}), ConfigError);
  EXPECT_THROW(induce_imbalance(s.train, ImbalanceSpec{{{0, 0.0}}, 0}), ConfigError);
  EXPECT_THROW(induce_imbalance(s.train, ImbalanceSpec{{{0, 1.5}}, 0}), ConfigError);
}

// ---- IDX ------------------------------------------------------------------------

std::string be32(std::uint32_t v) {
  std::string s(4, '\0');
  for (int i = 0; i < 4; ++i) s[i] = static_cast<char>((v >> (24 - 8 * i)) & 0xff);
  return s;
}

void write_idx(const std::filesystem::path& dir, const std::string& prefix, int n,
               std::uint32_t image_magic = 0x803) {
  std::string img = be32(image_magic) + be32(n) + be32(2) + be32(2);
  std::string lbl = be32(0x801) + be32(n);
  for (int i = 0; i < n; ++i) {
    for (int p = 0; p < 4; ++p) img.push_back(static_cast<char>((i * 4 + p) % 256));
    lbl.push_back(static_cast<char>(i % 10));
  }
  testing::spit(dir / (prefix + "-images-idx3-ubyte"), img);
  testing::spit(dir / (prefix + "-labels-idx1-ubyte"), lbl);
}

TEST(Idx, SmallCorpusSplitsAndScales) {
  TempDir dir;
  write_idx(dir.path(), "train", 50);
  write_idx(dir.path(), "t10k", 20);
  const auto s = load_idx_digits(dir.path(), 10, 0);
  EXPECT_EQ(s.train.size(), 40);
  EXPECT_EQ(s.val.size(), 10);
  EXPECT_EQ(s.test.size(), 20);
  EXPECT_EQ(s.train.num_features(), 4);
  EXPECT_EQ(s.test.num_classes(), 10);
  EXPECT_FLOAT_EQ(s.test.features()(1, 2), 6.0f / 255.0f);
  EXPECT_EQ(s.test.label(13), 3);
  // Train and validation partition the training file.
  std::multiset<float> firsts;
  for (const auto* d : {&s.train, &s.val}) {
    for (Index i = 0; i < d->size(); ++i) firsts.insert(d->features()(i, 0));
  }
  EXPECT_EQ(firsts.size(), 50u);
  EXPECT_EQ(std::set<float>(firsts.begin(), firsts.end()).size(), 50u);
}

TEST(Idx, CorruptMagicNamesOffsetZero) {
  TempDir dir;
  write_idx(dir.path(), "train", 5, 0x804);
  try {
    read_idx_images(dir / "train-images-idx3-ubyte");
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), 0u);
    EXPECT_NE(std::string(e.what()).find("offset 0"), std::string::npos);
  }
  std::string lbl = be32(0x803) + be32(0);
  testing::spit(dir / "bad-labels", lbl);
  try {
    read_idx_labels(dir / "bad-labels");
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), 0u);
  }
}

TEST(Idx, TruncatedPixelsReportOffset) {
  TempDir dir;
  std::string img = be32(0x803) + be32(3) + be32(2) + be32(2) + std::string(5, '\1');
  testing::spit(dir / "img", img);
  try {
    read_idx_images(dir / "img");
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), 16u);
  }
}

TEST(Idx, StandardCorpusSizesAndFirstLabel) {
  if (!testing::have_mnist()) GTEST_SKIP() << "digit corpus not found";
  // Independent read of the first label: byte 8 of the raw label file.
  const auto raw = testing::slurp(testing::mnist_dir() / "train-labels-idx1-ubyte");
  ASSERT_GT(raw.size(), 8u);
  EXPECT_EQ(static_cast<int>(raw[8]), 5);
  EXPECT_EQ(read_idx_labels(testing::mnist_dir() / "train-labels-idx1-ubyte")[0], 5);
  const auto s = load_idx_digits(testing::mnist_dir());
  EXPECT_EQ(s.train.size(), 55000);
  EXPECT_EQ(s.val.size(), 5000);
  EXPECT_EQ(s.test.size(), 10000);
  EXPECT_EQ(s.train.num_features(), 784);
}

// ---- cache ----------------------------------------------------------------------

TEST(BinaryCache, RoundTripIsExact) {
  TempDir dir;
  const auto s = generate_synthetic(SyntheticSpec{});
  save_binary(s.test, dir / "test.bin");
  const auto back = load_binary(dir / "test.bin", Role::kTest);
  EXPECT_TRUE(back == s.test);
  EXPECT_EQ(back.name(), "test");
}

TEST(BinaryCache, RejectsTruncationAndTrailingBytes) {
  TempDir dir;
  const auto s = generate_synthetic(SyntheticSpec{});
  auto bytes = encode_binary(s.val);
  testing::spit(dir / "long.bin", bytes + "x");
  EXPECT_THROW(load_binary(dir / "long.bin", Role::kVal), FormatError);
  testing::spit(dir / "short.bin", bytes.substr(0, bytes.size() - 3));
  EXPECT_THROW(load_binary(dir / "short.bin", Role::kVal), FormatError);
}

TEST(Csv, HeaderAndRows) {
  LabeledDataset ds(tiny_features(2, 3), {1, 0}, 2, Role::kTrain, "x");
  EXPECT_EQ(to_csv(ds), "label,f0,f1,f2\n1,0,1,2\n0,3,4,5\n");
}

}  // namespace
}  // namespace dpsubsel
