#pragma once

// Differentiable objectives at desk scale: analytic test functions, a small
// fully-connected classifier, IDX dataset loading and mini-batch partitions.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <iostream>
#include <iterator>
#include <memory>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "qsgld/error.hpp"
#include "qsgld/numerics.hpp"

namespace qsgld {

struct LossGrad {
  double value = 0.0;
  ParamVector grad;
};

// ---------------------------------------------------------------------------
// Analytic functions

enum class AnalyticKind { quadratic, rosenbrock, rastrigin };

inline std::string to_string(AnalyticKind k) {
  switch (k) {
  case AnalyticKind::quadratic:
    return "quadratic";
  case AnalyticKind::rosenbrock:
    return "rosenbrock";
  case AnalyticKind::rastrigin:
    return "rastrigin";
  }
  return "?";
}

inline AnalyticKind analytic_kind_from_string(const std::string& s) {
  if (s == "quadratic") {
    return AnalyticKind::quadratic;
  }
  if (s == "rosenbrock") {
    return AnalyticKind::rosenbrock;
  }
  if (s == "rastrigin") {
    return AnalyticKind::rastrigin;
  }
  throw UsageError("unknown analytic function '" + s + "'");
}

inline constexpr double kRosenbrockA = 1.0;
inline constexpr double kRosenbrockB = 100.0;
inline constexpr double kRastriginA = 10.0;

/// quadratic: 0.5·|x|^2; rosenbrock: sum b(x_{i+1} - x_i^2)^2 + (a - x_i)^2;
/// rastrigin: A·d + sum x_i^2 - A cos(2 pi x_i).
inline LossGrad eval_analytic(AnalyticKind kind, const ParamVector& x) {
  if (x.empty()) {
    throw UsageError("eval_analytic: empty point");
  }
  LossGrad out{0.0, ParamVector(x.dim())};
  switch (kind) {
  case AnalyticKind::quadratic: {
    CompensatedAccumulator acc;
    for (std::size_t i = 0; i < x.dim(); ++i) {
      acc.add(0.5 * x[i] * x[i]);
      out.grad[i] = x[i];
    }
    out.value = acc.value();
    break;
  }
  case AnalyticKind::rosenbrock: {
    if (x.dim() < 2) {
      throw UsageError("eval_analytic: rosenbrock needs dimension >= 2");
    }
    CompensatedAccumulator acc;
    for (std::size_t i = 0; i + 1 < x.dim(); ++i) {
      const double inner = x[i + 1] - x[i] * x[i];
      const double lin = kRosenbrockA - x[i];
      acc.add(kRosenbrockB * inner * inner + lin * lin);
      out.grad[i] += -4.0 * kRosenbrockB * x[i] * inner - 2.0 * lin;
      out.grad[i + 1] += 2.0 * kRosenbrockB * inner;
    }
    out.value = acc.value();
    break;
  }
  case AnalyticKind::rastrigin: {
    constexpr double two_pi = 2.0 * std::numbers::pi;
    CompensatedAccumulator acc;
    acc.add(kRastriginA * static_cast<double>(x.dim()));
    for (std::size_t i = 0; i < x.dim(); ++i) {
      acc.add(x[i] * x[i] - kRastriginA * std::cos(two_pi * x[i]));
      out.grad[i] = 2.0 * x[i] + two_pi * kRastriginA * std::sin(two_pi * x[i]);
    }
    // cos rounding can leave a tiny negative residue at the minimum
    out.value = std::max(0.0, acc.value());
    break;
  }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Datasets

struct Dataset {
  std::vector<double> features; // n rows of p features, row-major
  std::vector<std::int32_t> labels;
  std::size_t n = 0;
  std::size_t p = 0;
  std::size_t classes = 0;

  std::span<const double> row(std::size_t i) const { return {features.data() + i * p, p}; }

  void validate() const {
    if (features.size() != n * p || labels.size() != n) {
      throw DataError("dataset: inconsistent shapes");
    }
    for (auto l : labels) {
      if (l < 0 || static_cast<std::size_t>(l) >= classes) {
        throw DataError("dataset: label " + std::to_string(l) + " outside [0, " + std::to_string(classes) + ")");
      }
    }
  }
};

/// Two Gaussian blobs centred at -mean·1 (label 0) and +mean·1 (label 1).
inline Dataset make_blobs(std::size_t n, RngStream& rng, std::size_t p = 2, double mean = 1.0, double sigma = 0.5) {
  Dataset ds;
  ds.n = n;
  ds.p = p;
  ds.classes = 2;
  ds.features.resize(n * p);
  ds.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto label = static_cast<std::int32_t>(i % 2);
    const double centre = label == 0 ? -mean : mean;
    ds.labels[i] = label;
    for (std::size_t j = 0; j < p; ++j) {
      ds.features[i * p + j] = centre + sigma * rng.normal();
    }
  }
  return ds;
}

namespace detail {

inline std::vector<unsigned char> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw FormatError("cannot open '" + path + "'", 0);
  }
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::uint32_t read_be32(const std::vector<unsigned char>& buf, std::size_t offset, const std::string& path) {
  if (offset + 4 > buf.size()) {
    throw FormatError("truncated IDX header in '" + path + "'", buf.size());
  }
  return (std::uint32_t{buf[offset]} << 24) | (std::uint32_t{buf[offset + 1]} << 16) |
         (std::uint32_t{buf[offset + 2]} << 8) | std::uint32_t{buf[offset + 3]};
}

} // namespace detail

inline constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

/// Loads an IDX image/label pair (MNIST layout). Pixels are scaled to [0, 1].
/// `limit` caps the number of samples read; 0 yields an empty dataset.
inline Dataset load_idx(const std::string& images_path, const std::string& labels_path,
                        std::optional<std::size_t> limit = std::nullopt) {
  const auto img = detail::read_file(images_path);
  const auto lab = detail::read_file(labels_path);

  const auto img_magic = detail::read_be32(img, 0, images_path);
  if (img_magic != kIdxImagesMagic) {
    throw FormatError("bad image magic in '" + images_path + "'", 0);
  }
  const auto lab_magic = detail::read_be32(lab, 0, labels_path);
  if (lab_magic != kIdxLabelsMagic) {
    throw FormatError("bad label magic in '" + labels_path + "'", 0);
  }

  const std::size_t n_img = detail::read_be32(img, 4, images_path);
  const std::size_t rows = detail::read_be32(img, 8, images_path);
  const std::size_t cols = detail::read_be32(img, 12, images_path);
  const std::size_t n_lab = detail::read_be32(lab, 4, labels_path);
  if (n_img != n_lab) {
    throw FormatError("image count " + std::to_string(n_img) + " != label count " + std::to_string(n_lab), 4);
  }

  std::size_t n = n_img;
  if (limit) {
    if (*limit == 0) {
      std::cerr << "warning: load_idx called with limit=0, returning an empty dataset\n";
    }
    n = std::min(n, *limit);
  }

  constexpr std::size_t img_header = 16;
  constexpr std::size_t lab_header = 8;
  const std::size_t p = rows * cols;
  if (img.size() < img_header + n * p) {
    throw FormatError("truncated image payload in '" + images_path + "'", img.size());
  }
  if (lab.size() < lab_header + n) {
    throw FormatError("truncated label payload in '" + labels_path + "'", lab.size());
  }

  Dataset ds;
  ds.n = n;
  ds.p = p;
  ds.features.resize(n * p);
  ds.labels.resize(n);
  std::size_t max_label = 0;
  for (std::size_t i = 0; i < n; ++i) {
    ds.labels[i] = lab[lab_header + i];
    max_label = std::max<std::size_t>(max_label, lab[lab_header + i]);
    for (std::size_t j = 0; j < p; ++j) {
      ds.features[i * p + j] = static_cast<double>(img[img_header + i * p + j]) / 255.0;
    }
  }
  ds.classes = std::max<std::size_t>(10, max_label + 1);
  return ds;
}

/// Shuffled partition of [0, n) into ceil(n / batch_size) batches; the last
/// batch keeps the remainder.
inline std::vector<std::vector<std::size_t>> make_batches(std::size_t n, std::size_t batch_size, RngStream& rng) {
  if (batch_size == 0 || batch_size > n) {
    throw UsageError("make_batches: batch size " + std::to_string(batch_size) + " not in [1, " +
                     std::to_string(n) + "]");
  }
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) {
    order[i] = i;
  }
  rng.shuffle(order);
  std::vector<std::vector<std::size_t>> batches;
  batches.reserve((n + batch_size - 1) / batch_size);
  for (std::size_t start = 0; start < n; start += batch_size) {
    const std::size_t stop = std::min(n, start + batch_size);
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                         order.begin() + static_cast<std::ptrdiff_t>(stop));
  }
  return batches;
}

inline std::vector<std::vector<std::size_t>> make_batches(const Dataset& ds, std::size_t batch_size, RngStream& rng) {
  return make_batches(ds.n, batch_size, rng);
}

// ---------------------------------------------------------------------------
// Multi-layer perceptron with softmax cross-entropy

enum class Activation { relu, tanh };

struct MlpSpec {
  std::vector<std::size_t> layer_widths; // input width first, class count last
  Activation activation = Activation::relu;

  std::size_t layers() const noexcept { return layer_widths.size() - 1; }

  std::size_t param_count() const {
    std::size_t total = 0;
    for (std::size_t l = 0; l + 1 < layer_widths.size(); ++l) {
      total += layer_widths[l + 1] * layer_widths[l] + layer_widths[l + 1];
    }
    return total;
  }

  void validate() const {
    if (layer_widths.size() < 2) {
      throw UsageError("mlp: need at least input and output widths");
    }
    for (auto w : layer_widths) {
      if (w == 0) {
        throw UsageError("mlp: layer widths must be positive");
      }
    }
  }

  void check_against(const Dataset& ds) const {
    if (layer_widths.front() != ds.p) {
      throw UsageError("mlp: input width " + std::to_string(layer_widths.front()) + " != feature count " +
                       std::to_string(ds.p));
    }
    if (layer_widths.back() != ds.classes) {
      throw UsageError("mlp: output width " + std::to_string(layer_widths.back()) + " != class count " +
                       std::to_string(ds.classes));
    }
  }
};

/// Weights ~ U(-sqrt(6/(fan_in+fan_out)), +...), biases zero.
inline ParamVector mlp_init(const MlpSpec& spec, RngStream& rng) {
  spec.validate();
  ParamVector params(spec.param_count());
  std::size_t off = 0;
  for (std::size_t l = 0; l < spec.layers(); ++l) {
    const std::size_t in = spec.layer_widths[l];
    const std::size_t out = spec.layer_widths[l + 1];
    const double bound = std::sqrt(6.0 / static_cast<double>(in + out));
    for (std::size_t k = 0; k < in * out; ++k) {
      params[off++] = rng.uniform(-bound, bound);
    }
    off += out;
  }
  return params;
}

namespace detail {

struct MlpWorkspace {
  std::vector<std::vector<double>> pre;  // pre-activations per layer
  std::vector<std::vector<double>> post; // activations, post[0] = input
};

inline double activate(Activation a, double z) noexcept { return a == Activation::relu ? std::max(0.0, z) : std::tanh(z); }

inline double activate_grad(Activation a, double z, double fz) noexcept {
  return a == Activation::relu ? (z > 0.0 ? 1.0 : 0.0) : 1.0 - fz * fz;
}

/// Forward pass; returns logits in ws.pre.back().
inline void mlp_forward(const MlpSpec& spec, std::span<const double> params, std::span<const double> input,
                        MlpWorkspace& ws) {
  const std::size_t L = spec.layers();
  ws.pre.resize(L);
  ws.post.resize(L + 1);
  ws.post[0].assign(input.begin(), input.end());
  std::size_t off = 0;
  for (std::size_t l = 0; l < L; ++l) {
    const std::size_t in = spec.layer_widths[l];
    const std::size_t out = spec.layer_widths[l + 1];
    const double* w = params.data() + off;
    const double* b = w + in * out;
    ws.pre[l].assign(out, 0.0);
    for (std::size_t o = 0; o < out; ++o) {
      double z = b[o];
      for (std::size_t i = 0; i < in; ++i) {
        z += w[o * in + i] * ws.post[l][i];
      }
      ws.pre[l][o] = z;
    }
    if (l + 1 < L) {
      ws.post[l + 1].resize(out);
      for (std::size_t o = 0; o < out; ++o) {
        ws.post[l + 1][o] = activate(spec.activation, ws.pre[l][o]);
      }
    } else {
      ws.post[l + 1] = ws.pre[l];
    }
    off += in * out + out;
  }
}

/// log-softmax of the logits, stable.
inline std::vector<double> log_softmax(const std::vector<double>& logits) {
  const double m = *std::max_element(logits.begin(), logits.end());
  double s = 0.0;
  for (double z : logits) {
    s += std::exp(z - m);
  }
  const double lse = m + std::log(s);
  std::vector<double> out(logits.size());
  for (std::size_t k = 0; k < logits.size(); ++k) {
    out[k] = logits[k] - lse;
  }
  return out;
}

inline std::size_t checked_label(const Dataset& ds, std::size_t idx, std::size_t classes) {
  if (idx >= ds.n) {
    throw DataError("mlp: sample index " + std::to_string(idx) + " out of range");
  }
  const auto label = ds.labels[idx];
  if (label < 0 || static_cast<std::size_t>(label) >= classes) {
    throw DataError("mlp: label " + std::to_string(label) + " outside [0, " + std::to_string(classes) + ")");
  }
  return static_cast<std::size_t>(label);
}

} // namespace detail

/// Mean cross-entropy over `batch` (indices into ds) and its exact gradient.
inline LossGrad mlp_loss_grad(const MlpSpec& spec, const ParamVector& params, const Dataset& ds,
                              std::span<const std::size_t> batch) {
  spec.validate();
  if (params.dim() != spec.param_count()) {
    throw StructuralError("mlp_loss_grad: expected " + std::to_string(spec.param_count()) + " parameters, got " +
                          std::to_string(params.dim()));
  }
  if (batch.empty()) {
    throw UsageError("mlp_loss_grad: empty batch");
  }
  if (spec.layer_widths.front() != ds.p) {
    throw StructuralError("mlp_loss_grad: input width does not match dataset features");
  }
  const std::size_t L = spec.layers();
  const std::size_t classes = spec.layer_widths.back();

  LossGrad out{0.0, ParamVector(params.dim())};
  detail::MlpWorkspace ws;
  std::vector<double> delta;
  std::vector<double> delta_prev;
  CompensatedAccumulator loss;

  for (std::size_t idx : batch) {
    const std::size_t label = detail::checked_label(ds, idx, classes);
    detail::mlp_forward(spec, params.values(), ds.row(idx), ws);
    const auto logp = detail::log_softmax(ws.pre[L - 1]);
    loss.add(-logp[label]);

    delta.resize(classes);
    for (std::size_t k = 0; k < classes; ++k) {
      delta[k] = std::exp(logp[k]) - (k == label ? 1.0 : 0.0);
    }

    // walk layers backwards; offsets of each layer's block
    std::size_t off = params.dim();
    for (std::size_t l = L; l-- > 0;) {
      const std::size_t in = spec.layer_widths[l];
      const std::size_t outw = spec.layer_widths[l + 1];
      off -= in * outw + outw;
      const double* w = params.values().data() + off;
      double* gw = out.grad.values().data() + off;
      double* gb = gw + in * outw;
      for (std::size_t o = 0; o < outw; ++o) {
        gb[o] += delta[o];
        for (std::size_t i = 0; i < in; ++i) {
          gw[o * in + i] += delta[o] * ws.post[l][i];
        }
      }
      if (l > 0) {
        delta_prev.assign(in, 0.0);
        for (std::size_t o = 0; o < outw; ++o) {
          for (std::size_t i = 0; i < in; ++i) {
            delta_prev[i] += w[o * in + i] * delta[o];
          }
        }
        for (std::size_t i = 0; i < in; ++i) {
          delta_prev[i] *= detail::activate_grad(spec.activation, ws.pre[l - 1][i], ws.post[l][i]);
        }
        delta.swap(delta_prev);
      }
    }
  }

  const double inv = 1.0 / static_cast<double>(batch.size());
  out.value = std::max(0.0, loss.value() * inv);
  for (double& g : out.grad) {
    g *= inv;
  }
  return out;
}

/// Mean cross-entropy and accuracy over the whole dataset.
inline std::pair<double, double> mlp_evaluate(const MlpSpec& spec, const ParamVector& params, const Dataset& ds) {
  if (ds.n == 0) {
    throw UsageError("mlp_evaluate: empty dataset");
  }
  const std::size_t L = spec.layers();
  const std::size_t classes = spec.layer_widths.back();
  detail::MlpWorkspace ws;
  CompensatedAccumulator loss;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < ds.n; ++i) {
    const std::size_t label = detail::checked_label(ds, i, classes);
    detail::mlp_forward(spec, params.values(), ds.row(i), ws);
    const auto logp = detail::log_softmax(ws.pre[L - 1]);
    loss.add(-logp[label]);
    const auto best = static_cast<std::size_t>(std::max_element(logp.begin(), logp.end()) - logp.begin());
    correct += best == label ? 1 : 0;
  }
  const double n = static_cast<double>(ds.n);
  return {loss.value() / n, static_cast<double>(correct) / n};
}

// ---------------------------------------------------------------------------
// Objective interface consumed by the optimizers

enum class ObjectiveKind { analytic, mlp_classifier };

/// Differentiable loss over B mini-batches. Instances carry per-run state
/// (the epoch's batch schedule) and are owned by one run.
class Objective {
public:
  virtual ~Objective() = default;

  virtual std::size_t dim() const = 0;
  virtual std::size_t batch_count() const = 0;
  virtual ObjectiveKind kind() const = 0;

  /// Called once at the start of each epoch.
  virtual void begin_epoch(RngStream& /*rng*/) {}

  virtual LossGrad batch_loss_grad(std::size_t batch, const ParamVector& x, RngStream& rng) = 0;

  /// Full training objective and its exact gradient.
  virtual LossGrad full_loss_grad(const ParamVector& x) const = 0;

  virtual double loss(const ParamVector& x) const { return full_loss_grad(x).value; }

  virtual std::optional<double> eval_loss(const ParamVector& /*x*/) const { return std::nullopt; }
  virtual std::optional<double> accuracy(const ParamVector& /*x*/) const { return std::nullopt; }
};

/// Analytic function split into `batches` identical mini-batches. With
/// grad_noise > 0 each mini-batch gradient carries independent N(0, s^2)
/// noise per coordinate (the stochastic-batch wrapper).
class AnalyticObjective final : public Objective {
public:
  AnalyticObjective(AnalyticKind fn, std::size_t dim, std::size_t batches = 1, double grad_noise = 0.0)
      : fn_(fn), dim_(dim), batches_(batches), grad_noise_(grad_noise) {
    if (dim == 0) {
      throw UsageError("analytic objective: dimension must be positive");
    }
    if (fn == AnalyticKind::rosenbrock && dim < 2) {
      throw UsageError("analytic objective: rosenbrock needs dimension >= 2");
    }
    if (batches == 0) {
      throw UsageError("analytic objective: batch count must be positive");
    }
    if (!(grad_noise >= 0.0)) {
      throw UsageError("analytic objective: gradient noise must be non-negative");
    }
  }

  std::size_t dim() const override { return dim_; }
  std::size_t batch_count() const override { return batches_; }
  ObjectiveKind kind() const override { return ObjectiveKind::analytic; }
  AnalyticKind function() const noexcept { return fn_; }
  double grad_noise() const noexcept { return grad_noise_; }

  LossGrad batch_loss_grad(std::size_t /*batch*/, const ParamVector& x, RngStream& rng) override {
    auto lg = eval_analytic(fn_, x);
    if (grad_noise_ > 0.0) {
      for (double& g : lg.grad) {
        g += grad_noise_ * rng.normal();
      }
    }
    return lg;
  }

  LossGrad full_loss_grad(const ParamVector& x) const override { return eval_analytic(fn_, x); }

private:
  AnalyticKind fn_;
  std::size_t dim_;
  std::size_t batches_;
  double grad_noise_;
};

class MlpObjective final : public Objective {
public:
  MlpObjective(MlpSpec spec, std::shared_ptr<const Dataset> train, std::shared_ptr<const Dataset> test,
               std::size_t batch_size)
      : spec_(std::move(spec)), train_(std::move(train)), test_(std::move(test)), batch_size_(batch_size) {
    spec_.validate();
    if (!train_ || train_->n == 0) {
      throw UsageError("mlp objective: empty training set");
    }
    spec_.check_against(*train_);
    if (test_) {
      spec_.check_against(*test_);
    }
    if (batch_size_ == 0 || batch_size_ > train_->n) {
      throw UsageError("mlp objective: batch size must be in [1, n]");
    }
    batch_total_ = (train_->n + batch_size_ - 1) / batch_size_;
  }

  std::size_t dim() const override { return spec_.param_count(); }
  std::size_t batch_count() const override { return batch_total_; }
  ObjectiveKind kind() const override { return ObjectiveKind::mlp_classifier; }
  const MlpSpec& spec() const noexcept { return spec_; }

  void begin_epoch(RngStream& rng) override { schedule_ = make_batches(*train_, batch_size_, rng); }

  LossGrad batch_loss_grad(std::size_t batch, const ParamVector& x, RngStream& /*rng*/) override {
    if (schedule_.empty()) {
      throw UsageError("mlp objective: begin_epoch was not called");
    }
    return mlp_loss_grad(spec_, x, *train_, schedule_.at(batch));
  }

  LossGrad full_loss_grad(const ParamVector& x) const override {
    std::vector<std::size_t> all(train_->n);
    for (std::size_t i = 0; i < all.size(); ++i) {
      all[i] = i;
    }
    return mlp_loss_grad(spec_, x, *train_, all);
  }

  double loss(const ParamVector& x) const override { return mlp_evaluate(spec_, x, *train_).first; }

  std::optional<double> eval_loss(const ParamVector& x) const override {
    if (!test_ || test_->n == 0) {
      return std::nullopt;
    }
    return mlp_evaluate(spec_, x, *test_).first;
  }

  std::optional<double> accuracy(const ParamVector& x) const override {
    const auto& ds = (test_ && test_->n > 0) ? *test_ : *train_;
    return mlp_evaluate(spec_, x, ds).second;
  }

private:
  MlpSpec spec_;
  std::shared_ptr<const Dataset> train_;
  std::shared_ptr<const Dataset> test_;
  std::size_t batch_size_;
  std::size_t batch_total_ = 0;
  std::vector<std::vector<std::size_t>> schedule_;
};

} // namespace qsgld
