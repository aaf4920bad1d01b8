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

// Small differentiable classifiers (multinomial logistic regression and a
// one-hidden-layer ReLU MLP) with closed-form per-sample gradients.
//
// Parameter layout, flattened row-major:
//   logistic: [W (c x m), b (c)]
//   mlp:      [W1 (h x m), b1 (h), W2 (c x h), b2 (c)]
// The final linear layer is always the trailing c * (fan_in + 1) entries.

#ifndef DPSUBSEL_MODEL_HPP_
#define DPSUBSEL_MODEL_HPP_

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "dpsubsel/data.hpp"
#include "dpsubsel/error.hpp"
#include "dpsubsel/io.hpp"
#include "dpsubsel/rng.hpp"

namespace dpsubsel {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

enum class ArchKind { kLogistic, kMlp };

struct Architecture {
  ArchKind kind = ArchKind::kLogistic;
  Index hidden = 0;

  static Architecture logistic() { return {ArchKind::kLogistic, 0}; }
  static Architecture mlp(Index h) { return {ArchKind::kMlp, h}; }

  bool operator==(const Architecture&) const = default;

  std::string name() const {
    return kind == ArchKind::kLogistic ? "logistic" : "mlp" + std::to_string(hidden);
  }
};

// Accepts "logistic" or "mlp<h>" (e.g. "mlp64").
inline Architecture parse_architecture(const std::string& s) {
  if (s == "logistic") return Architecture::logistic();
  if (s.rfind("mlp", 0) == 0 && s.size() > 3) {
    const auto h = std::stoll(s.substr(3));
    if (h < 1) throw ConfigError("mlp hidden width must be >= 1");
    return Architecture::mlp(h);
  }
  throw ConfigError("unknown architecture '" + s + "'");
}

struct ModelDims {
  Index inputs = 0;
  int classes = 0;
  bool operator==(const ModelDims&) const = default;
};

inline Index parameter_count(const Architecture& arch, const ModelDims& d) {
  if (arch.kind == ArchKind::kLogistic) return d.classes * d.inputs + d.classes;
  return arch.hidden * d.inputs + arch.hidden + d.classes * arch.hidden + d.classes;
}

// Fan-in of the final linear layer.
inline Index last_layer_inputs(const Architecture& arch, const ModelDims& d) {
  return arch.kind == ArchKind::kLogistic ? d.inputs : arch.hidden;
}

inline Index last_layer_size(const Architecture& arch, const ModelDims& d) {
  return d.classes * (last_layer_inputs(arch, d) + 1);
}

struct ModelState {
  Architecture arch;
  ModelDims dims;
  Eigen::VectorXd theta;

  Index param_count() const { return parameter_count(arch, dims); }
  Index last_layer_offset() const { return param_count() - last_layer_size(arch, dims); }
  Index last_layer_width() const { return last_layer_inputs(arch, dims); }

  void validate() const {
    if (theta.size() != param_count()) {
      throw ConfigError("theta has " + std::to_string(theta.size()) +
                        " entries, architecture needs " + std::to_string(param_count()));
    }
    if (!theta.allFinite()) throw DomainError("theta contains non-finite entries");
  }
};

// Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)); biases zero.
inline ModelState init_model(const Architecture& arch, const ModelDims& dims,
                             std::uint64_t seed) {
  if (dims.inputs < 1 || dims.classes < 2) throw ConfigError("invalid model dims");
  if (arch.kind == ArchKind::kMlp && arch.hidden < 1) throw ConfigError("mlp needs hidden >= 1");
  ModelState s{arch, dims, Eigen::VectorXd::Zero(parameter_count(arch, dims))};
  Rng rng(derive_seed(seed, 101));
  auto fill = [&](Index offset, Index count, Index fan_in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (Index i = 0; i < count; ++i) s.theta(offset + i) = rng.uniform(-bound, bound);
  };
  if (arch.kind == ArchKind::kLogistic) {
    fill(0, dims.classes * dims.inputs, dims.inputs);
  } else {
    const Index h = arch.hidden;
    fill(0, h * dims.inputs, dims.inputs);
    fill(h * dims.inputs + h, dims.classes * h, h);
  }
  return s;
}

namespace detail {

using ConstRowMap = Eigen::Map<const RowMatrix>;

// Views into theta for each layer. For logistic only the output layer exists.
struct Layers {
  const double* base = nullptr;
  Index m = 0, h = 0, c = 0;
  bool mlp = false;

  ConstRowMap w1() const { return ConstRowMap(base, h, m); }
  Eigen::Map<const Eigen::VectorXd> b1() const {
    return Eigen::Map<const Eigen::VectorXd>(base + h * m, h);
  }
  Index out_offset() const { return mlp ? h * m + h : 0; }
  Index fan() const { return mlp ? h : m; }
  ConstRowMap w2() const { return ConstRowMap(base + out_offset(), c, fan()); }
  Eigen::Map<const Eigen::VectorXd> b2() const {
    return Eigen::Map<const Eigen::VectorXd>(base + out_offset() + c * fan(), c);
  }
};

inline Layers layers(const ModelState& s) {
  return Layers{s.theta.data(), s.dims.inputs, s.arch.hidden, s.dims.classes,
                s.arch.kind == ArchKind::kMlp};
}

inline double log_sum_exp(const Eigen::Ref<const Eigen::VectorXd>& z) {
  const double mx = z.maxCoeff();
  return mx + std::log((z.array() - mx).exp().sum());
}

inline void check_indices(const LabeledDataset& ds, std::span<const Index> idx) {
  for (Index i : idx) {
    if (i < 0 || i >= ds.size()) {
      throw DomainError("index " + std::to_string(i) + " outside dataset of size " +
                        std::to_string(ds.size()));
    }
  }
}

inline void check_compatible(const ModelState& s, const LabeledDataset& ds) {
  if (ds.num_features() != s.dims.inputs || ds.num_classes() != s.dims.classes) {
    throw ConfigError("model dims do not match dataset '" + ds.name() + "'");
  }
}

}  // namespace detail

inline std::vector<Index> all_indices(Index n) {
  std::vector<Index> v(static_cast<std::size_t>(n));
  std::iota(v.begin(), v.end(), Index{0});
  return v;
}

// Rows of `ds` picked by `idx`, widened to double.
inline RowMatrix gather_rows(const LabeledDataset& ds, std::span<const Index> idx) {
  RowMatrix x(static_cast<Index>(idx.size()), ds.num_features());
  for (std::size_t r = 0; r < idx.size(); ++r) {
    x.row(static_cast<Index>(r)) = ds.features().row(idx[r]).cast<double>();
  }
  return x;
}

// Batched last-layer inputs: the raw features for logistic, the ReLU
// activations for the MLP.
inline RowMatrix penultimate_features(const ModelState& s, const RowMatrix& x) {
  if (s.arch.kind == ArchKind::kLogistic) return x;
  const auto l = detail::layers(s);
  RowMatrix a = x * l.w1().transpose();
  a.rowwise() += l.b1().transpose();
  return a.cwiseMax(0.0);
}

inline RowMatrix penultimate_features(const ModelState& s, const LabeledDataset& ds,
                                   std::span<const Index> idx) {
  detail::check_compatible(s, ds);
  detail::check_indices(ds, idx);
  return penultimate_features(s, gather_rows(ds, idx));
}

inline RowMatrix logits(const ModelState& s, const RowMatrix& x) {
  const auto l = detail::layers(s);
  RowMatrix z = penultimate_features(s, x) * l.w2().transpose();
  z.rowwise() += l.b2().transpose();
  return z;
}

struct LossAccuracy {
  double loss = 0.0;
  double accuracy = 0.0;
};

// Mean cross-entropy and argmax accuracy over `idx`.
inline LossAccuracy forward_loss(const ModelState& s, const LabeledDataset& ds,
                                 std::span<const Index> idx) {
  if (idx.empty()) throw DomainError("forward_loss on an empty index set");
  detail::check_compatible(s, ds);
  detail::check_indices(ds, idx);
  constexpr std::size_t kChunk = 1024;
  double loss = 0.0;
  Index correct = 0;
  for (std::size_t start = 0; start < idx.size(); start += kChunk) {
    const auto part = idx.subspan(start, std::min(kChunk, idx.size() - start));
    const RowMatrix z = logits(s, gather_rows(ds, part));
    for (Index r = 0; r < z.rows(); ++r) {
      const int y = ds.label(part[static_cast<std::size_t>(r)]);
      loss += detail::log_sum_exp(z.row(r).transpose()) - z(r, y);
      Index arg = 0;
      z.row(r).maxCoeff(&arg);
      if (arg == y) ++correct;
    }
  }
  const auto n = static_cast<double>(idx.size());
  return {loss / n, static_cast<double>(correct) / n};
}

inline LossAccuracy forward_loss(const ModelState& s, const LabeledDataset& ds) {
  const auto idx = all_indices(ds.size());
  return forward_loss(s, ds, idx);
}

struct PerSampleGrads {
  RowMatrix grads;         // one row per requested example
  Eigen::VectorXd losses;  // per-example cross-entropy
};

namespace detail {

// Gradient of one example's loss into `out` (full length p, or only the
// last-layer slice when `last_only`). Computed row by row so the result does
// not depend on how the caller batches examples.
inline double example_gradient(const ModelState& s, const Eigen::VectorXd& x, int y,
                               bool last_only, Eigen::Ref<Eigen::RowVectorXd> out) {
  const auto l = layers(s);
  const Index c = s.dims.classes;
  Eigen::VectorXd h;
  Eigen::VectorXd a;
  if (s.arch.kind == ArchKind::kLogistic) {
    h = x;
  } else {
    a = l.w1() * x + l.b1();
    h = a.cwiseMax(0.0);
  }
  Eigen::VectorXd z = l.w2() * h + l.b2();
  const double lse = log_sum_exp(z);
  Eigen::VectorXd d2 = (z.array() - lse).exp().matrix();
  d2(y) -= 1.0;
  const Index fan = h.size();
  const Index last = c * (fan + 1);
  const Index off = last_only ? 0 : s.param_count() - last;
  for (Index k = 0; k < c; ++k) {
    out.segment(off + k * fan, fan) = d2(k) * h.transpose();
  }
  out.segment(off + c * fan, c) = d2.transpose();
  if (!last_only && s.arch.kind == ArchKind::kMlp) {
    const Index m = s.dims.inputs;
    const Index hid = s.arch.hidden;
    // ReLU subgradient at zero is zero.
    Eigen::VectorXd d1 = l.w2().transpose() * d2;
    for (Index j = 0; j < hid; ++j) {
      if (!(a(j) > 0.0)) d1(j) = 0.0;
    }
    for (Index j = 0; j < hid; ++j) out.segment(j * m, m) = d1(j) * x.transpose();
    out.segment(hid * m, hid) = d1.transpose();
  }
  return lse - z(y);
}

inline PerSampleGrads gradients_impl(const ModelState& s, const LabeledDataset& ds,
                                     std::span<const Index> idx, bool last_only,
                                     std::size_t chunk) {
  if (idx.empty()) throw DomainError("per-sample gradients need a nonempty index set");
  check_compatible(s, ds);
  check_indices(ds, idx);
  const Index cols = last_only ? last_layer_size(s.arch, s.dims) : s.param_count();
  PerSampleGrads out{RowMatrix::Zero(static_cast<Index>(idx.size()), cols),
                     Eigen::VectorXd::Zero(static_cast<Index>(idx.size()))};
  if (chunk == 0) chunk = idx.size();
  for (std::size_t start = 0; start < idx.size(); start += chunk) {
    const auto part = idx.subspan(start, std::min(chunk, idx.size() - start));
    const RowMatrix x = gather_rows(ds, part);
    for (std::size_t r = 0; r < part.size(); ++r) {
      const auto row = static_cast<Index>(start + r);
      out.losses(row) = example_gradient(s, x.row(static_cast<Index>(r)).transpose(),
                                         ds.label(part[r]), last_only, out.grads.row(row));
    }
  }
  return out;
}

}  // namespace detail

// Row i is the exact gradient of example idx[i]'s loss. `chunk` only bounds
// the gather buffer; results are bitwise identical for every chunk size.
inline PerSampleGrads per_sample_gradients(const ModelState& s, const LabeledDataset& ds,
                                           std::span<const Index> idx,
                                           std::size_t chunk = 0) {
  return detail::gradients_impl(s, ds, idx, false, chunk);
}

// As per_sample_gradients, restricted to the final linear layer's columns.
inline PerSampleGrads last_layer_gradients(const ModelState& s, const LabeledDataset& ds,
                                           std::span<const Index> idx,
                                           std::size_t chunk = 0) {
  return detail::gradients_impl(s, ds, idx, true, chunk);
}

struct ClippedSum {
  Eigen::VectorXd sum;      // sum of clipped per-example gradients
  double max_norm = 0.0;    // largest pre-clip per-example norm
  Index clipped = 0;        // examples whose norm exceeded the bound
};

// Sum over idx of g_i * min(1, clip / ||g_i||) without materializing the
// per-example rows. Per-example norms use ||d x^T||_F = ||d|| ||x|| for each
// rank-one layer gradient. Matches per_sample_gradients + clipping up to
// floating-point reassociation.
inline ClippedSum clipped_gradient_sum(const ModelState& s, const LabeledDataset& ds,
                                       std::span<const Index> idx, double clip) {
  ClippedSum out{Eigen::VectorXd::Zero(s.param_count())};
  if (idx.empty()) return out;
  detail::check_compatible(s, ds);
  detail::check_indices(ds, idx);
  const auto l = detail::layers(s);
  const RowMatrix x = gather_rows(ds, idx);
  const Index b = x.rows();
  const Index c = s.dims.classes;

  RowMatrix a;
  RowMatrix h;
  if (s.arch.kind == ArchKind::kLogistic) {
    h = x;
  } else {
    a = x * l.w1().transpose();
    a.rowwise() += l.b1().transpose();
    h = a.cwiseMax(0.0);
  }
  RowMatrix d2 = h * l.w2().transpose();
  d2.rowwise() += l.b2().transpose();
  for (Index r = 0; r < b; ++r) {
    const double mx = d2.row(r).maxCoeff();
    d2.row(r) = (d2.row(r).array() - mx).exp().matrix();
    d2.row(r) /= d2.row(r).sum();
    d2(r, ds.label(idx[static_cast<std::size_t>(r)])) -= 1.0;
  }
  Eigen::VectorXd sq = d2.rowwise().squaredNorm().cwiseProduct(
      (h.rowwise().squaredNorm().array() + 1.0).matrix());
  RowMatrix d1;
  if (s.arch.kind == ArchKind::kMlp) {
    d1 = d2 * l.w2();
    for (Index r = 0; r < b; ++r) {
      for (Index j = 0; j < d1.cols(); ++j) {
        if (!(a(r, j) > 0.0)) d1(r, j) = 0.0;
      }
    }
    sq += d1.rowwise().squaredNorm().cwiseProduct(
        (x.rowwise().squaredNorm().array() + 1.0).matrix());
  }
  Eigen::VectorXd scale(b);
  for (Index r = 0; r < b; ++r) {
    const double norm = std::sqrt(sq(r));
    out.max_norm = std::max(out.max_norm, norm);
    if (norm > clip) {
      scale(r) = clip / norm;
      ++out.clipped;
    } else {
      scale(r) = 1.0;
    }
  }
  const RowMatrix d2s = scale.asDiagonal() * d2;
  const Index fan = h.cols();
  const Index off2 = s.param_count() - c * (fan + 1);
  Eigen::Map<RowMatrix>(out.sum.data() + off2, c, fan) = d2s.transpose() * h;
  out.sum.segment(off2 + c * fan, c) = d2s.colwise().sum().transpose();
  if (s.arch.kind == ArchKind::kMlp) {
    const RowMatrix d1s = scale.asDiagonal() * d1;
    const Index hid = s.arch.hidden;
    const Index m = s.dims.inputs;
    Eigen::Map<RowMatrix>(out.sum.data(), hid, m) = d1s.transpose() * x;
    out.sum.segment(hid * m, hid) = d1s.colwise().sum().transpose();
  }
  return out;
}

// ---- checkpoint -------------------------------------------------------------
//
// Layout (little-endian): u32 descriptor length, descriptor bytes
// ("<arch> <inputs> <classes>"), u64 p, p f64 values.

inline void save_checkpoint(const ModelState& s, const std::filesystem::path& path) {
  io::ByteWriter w;
  const std::string desc = s.arch.name() + " " + std::to_string(s.dims.inputs) + " " +
                           std::to_string(s.dims.classes);
  w.u32_le(static_cast<std::uint32_t>(desc.size()));
  w.bytes(desc);
  w.u64_le(static_cast<std::uint64_t>(s.theta.size()));
  for (Index i = 0; i < s.theta.size(); ++i) w.f64_le(s.theta(i));
  io::write_file_atomic(path, w.str());
}

inline ModelState load_checkpoint(const std::filesystem::path& path) {
  const auto data = io::read_file(path);
  io::ByteReader r(data);
  const auto len = r.u32_le("descriptor length");
  const auto desc_offset = r.offset();
  std::istringstream desc(r.bytes(len, "descriptor"));
  std::string arch_name;
  ModelDims dims;
  if (!(desc >> arch_name >> dims.inputs >> dims.classes)) {
    throw FormatError("malformed architecture descriptor", desc_offset);
  }
  ModelState s{parse_architecture(arch_name), dims, {}};
  const auto p = r.u64_le("parameter count");
  if (static_cast<Index>(p) != s.param_count()) {
    throw FormatError("parameter count does not match descriptor", r.offset() - 8);
  }
  s.theta.resize(static_cast<Index>(p));
  for (Index i = 0; i < s.theta.size(); ++i) s.theta(i) = r.f64_le("theta");
  s.validate();
  return s;
}

}  // namespace dpsubsel

#endif  // DPSUBSEL_MODEL_HPP_
