#pragma once

// Grid quantization, the increasing-resolution schedule for the
// quantization parameter Q_p, and the early-paralysis compensation term.

#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "qsgld/error.hpp"
#include "qsgld/numerics.hpp"

namespace qsgld {

/// Second moment of a uniform factor on [-1/2, 1/2).
inline constexpr double kC0 = 1.0 / 12.0;

/// |Q_p·x| beyond this cannot be held as an exact grid index.
inline constexpr double kMaxGridIndex = 0x1.0p52;

struct QuantizedScalar {
  std::int64_t level = 0;      // grid index n, value = n / qp
  double qp = 1.0;
  double epsilon_factor = 0.0; // (value - x)·qp, in [-1/2, 1/2)

  double value() const noexcept { return static_cast<double>(level) / qp; }
};

inline void require_valid_qp(double qp) {
  if (!(qp > 0.0) || !std::isfinite(qp)) {
    throw UsageError("quantization parameter must be positive and finite, got " + std::to_string(qp));
  }
}

/// Round x to the grid of spacing 1/qp.
///
/// The grid index is ceil(qp·x − 1/2), i.e. round-half-down. Away from exact
/// ties this coincides with floor(qp·(x + 1/(2qp))); at ties it keeps the
/// factor inside [-1/2, 1/2).
inline QuantizedScalar quantize_scalar(double x, double qp) {
  require_valid_qp(qp);
  if (!std::isfinite(x)) {
    throw NumericalError("quantize_scalar: non-finite input");
  }
  const double y = qp * x;
  if (!(std::abs(y) < kMaxGridIndex)) {
    throw RangeError("quantize_scalar: |qp·x| = " + std::to_string(std::abs(y)) +
                     " exceeds the exact grid-index range");
  }
  const double n = std::ceil(y - 0.5);
  return {static_cast<std::int64_t>(n), qp, n - y};
}

/// Grid-aligned vector: every entry is levels[i] / qp exactly.
struct QuantizedVector {
  std::vector<std::int64_t> levels;
  double qp = 1.0;

  std::size_t dim() const noexcept { return levels.size(); }

  double value(std::size_t i) const noexcept { return static_cast<double>(levels[i]) / qp; }

  ParamVector values() const {
    ParamVector out(levels.size());
    for (std::size_t i = 0; i < levels.size(); ++i) {
      out[i] = value(i);
    }
    return out;
  }

  bool is_zero() const noexcept {
    for (auto n : levels) {
      if (n != 0) {
        return false;
      }
    }
    return true;
  }
};

struct QuantizationErrorSample {
  double epsilon_factor = 0.0;
  double qp = 1.0;
  std::int64_t step_index = 0;
  std::uint32_t coord = 0;
  double input = 0.0;      // value handed to the quantizer
  std::int64_t level = 0;  // grid index it was mapped to

  double realized() const noexcept { return epsilon_factor / qp; }
};

/// Receives quantization-error samples as they are produced.
class ErrorSink {
public:
  virtual ~ErrorSink() = default;
  virtual void record(std::span<const QuantizationErrorSample> samples) = 0;
};

/// Keeps every sample.
class CollectingSink final : public ErrorSink {
public:
  void record(std::span<const QuantizationErrorSample> samples) override {
    samples_.insert(samples_.end(), samples.begin(), samples.end());
  }
  const std::vector<QuantizationErrorSample>& samples() const noexcept { return samples_; }
  std::vector<QuantizationErrorSample> take() noexcept { return std::move(samples_); }

private:
  std::vector<QuantizationErrorSample> samples_;
};

/// Keeps at most `cap` samples; beyond the cap, reservoir sampling (Algorithm
/// R) keeps a uniform subset of everything seen.
class ReservoirSink final : public ErrorSink {
public:
  ReservoirSink(std::size_t cap, RngStream rng) : cap_(cap), rng_(rng) { samples_.reserve(std::min<std::size_t>(cap, 1 << 16)); }

  void record(std::span<const QuantizationErrorSample> samples) override {
    for (const auto& s : samples) {
      ++seen_;
      if (samples_.size() < cap_) {
        samples_.push_back(s);
        continue;
      }
      const auto j = rng_.index(seen_);
      if (j < cap_) {
        samples_[j] = s;
      }
    }
  }

  std::uint64_t seen() const noexcept { return seen_; }
  const std::vector<QuantizationErrorSample>& samples() const noexcept { return samples_; }

private:
  std::size_t cap_;
  RngStream rng_;
  std::uint64_t seen_ = 0;
  std::vector<QuantizationErrorSample> samples_;
};

inline std::pair<QuantizedVector, std::vector<QuantizationErrorSample>>
quantize_vector(const ParamVector& x, double qp, std::int64_t step_index = 0) {
  require_valid_qp(qp);
  QuantizedVector q;
  q.qp = qp;
  q.levels.resize(x.dim());
  std::vector<QuantizationErrorSample> errors(x.dim());
  for (std::size_t i = 0; i < x.dim(); ++i) {
    const auto s = quantize_scalar(x[i], qp);
    q.levels[i] = s.level;
    errors[i] = {s.epsilon_factor, qp, step_index, static_cast<std::uint32_t>(i), x[i], s.level};
  }
  return {std::move(q), std::move(errors)};
}

enum class ScheduleKind {
  power_of_base,   // Q_p = eta · b^pbar,  pbar = floor(0.5 · log_b log(tau_e + 2)), clamped at 0
  capped_sqrt_log, // Q_p = floor(sqrt(log(t_e + 2) / C)), clamped at 1
  constant,        // Q_p = eta
};

inline std::string to_string(ScheduleKind k) {
  switch (k) {
  case ScheduleKind::power_of_base:
    return "power-of-base";
  case ScheduleKind::capped_sqrt_log:
    return "capped-sqrt-log";
  case ScheduleKind::constant:
    return "constant";
  }
  return "?";
}

inline ScheduleKind schedule_kind_from_string(const std::string& s) {
  if (s == "power-of-base") {
    return ScheduleKind::power_of_base;
  }
  if (s == "capped-sqrt-log") {
    return ScheduleKind::capped_sqrt_log;
  }
  if (s == "constant") {
    return ScheduleKind::constant;
  }
  throw UsageError("unknown schedule kind '" + s + "'");
}

/// Recommended constants: eta^2 = 2^19, C = 1/eta^2, b = 2.
inline constexpr double kDefaultEtaSquared = 524288.0;

struct QuantizationSchedule {
  ScheduleKind kind = ScheduleKind::capped_sqrt_log;
  double eta = std::sqrt(kDefaultEtaSquared);
  int base = 2;
  double big_c = 1.0 / kDefaultEtaSquared;
  std::int64_t batches_per_epoch = 1;
  /// Base of the inner logarithm; natural log unless overridden.
  double log_base = std::numbers::e;

  void validate() const {
    if (!(eta > 0.0) || !std::isfinite(eta)) {
      throw UsageError("schedule: eta must be positive");
    }
    if (base < 2) {
      throw UsageError("schedule: base must be >= 2");
    }
    if (!(big_c > 0.0) || !std::isfinite(big_c)) {
      throw UsageError("schedule: C must be positive");
    }
    if (batches_per_epoch < 1) {
      throw UsageError("schedule: batches_per_epoch must be >= 1");
    }
    if (!(log_base > 1.0)) {
      throw UsageError("schedule: log_base must exceed 1");
    }
  }

  std::int64_t epoch_of(std::int64_t tau) const noexcept { return tau / batches_per_epoch; }
};

inline double schedule_log(const QuantizationSchedule& s, double v) {
  return s.log_base == std::numbers::e ? std::log(v) : std::log(v) / std::log(s.log_base);
}

/// Exponent pbar for the power-of-base kind, evaluated at the first step of
/// tau's epoch and clamped below at 0.
inline int power_exponent(const QuantizationSchedule& s, std::int64_t tau) {
  if (tau < 0) {
    throw UsageError("schedule: tau must be non-negative");
  }
  const double tau_e = static_cast<double>(s.epoch_of(tau) * s.batches_per_epoch);
  const double inner = schedule_log(s, tau_e + 2.0);
  const double raw = std::floor(0.5 * std::log(inner) / std::log(static_cast<double>(s.base)));
  return raw < 0.0 ? 0 : static_cast<int>(raw);
}

inline double qp_at(const QuantizationSchedule& s, std::int64_t tau) {
  s.validate();
  if (tau < 0) {
    throw UsageError("schedule: tau must be non-negative");
  }
  switch (s.kind) {
  case ScheduleKind::power_of_base:
    return s.eta * std::pow(static_cast<double>(s.base), power_exponent(s, tau));
  case ScheduleKind::capped_sqrt_log: {
    const double t_e = static_cast<double>(s.epoch_of(tau));
    const double inner = schedule_log(s, t_e + 2.0);
    return std::max(1.0, std::floor(std::sqrt(inner / s.big_c)));
  }
  case ScheduleKind::constant:
    return s.eta;
  }
  return s.eta;
}

/// eta that makes Q_p^{-1} = lambda·sqrt(C_q/c0)·b^{-pbar} (the
/// Langevin-matching relation with pbar folded into the schedule).
inline double langevin_eta(double lambda, double cq) {
  if (!(lambda > 0.0) || !(cq > 0.0)) {
    throw UsageError("langevin_eta: lambda and C_q must be positive");
  }
  return std::sqrt(kC0 / cq) / lambda;
}

/// Q_p whose per-step error variance c0/Q_p^2 equals lambda·C_q·sigma^2, so
/// that 1/lambda steps inject variance C_q·sigma^2 per unit time.
inline double unit_time_qp(double lambda, double cq, double sigma = 1.0) {
  if (!(lambda > 0.0) || !(cq > 0.0) || !(sigma > 0.0)) {
    throw UsageError("unit_time_qp: lambda, C_q and sigma must be positive");
  }
  return std::sqrt(kC0 / (lambda * cq)) / sigma;
}

struct CompensationConfig {
  double kappa = 2.0;
  std::int64_t tau0 = 0; // half-time, in mini-batch steps
  double lambda = 0.01;
  bool enabled = true;

  void validate() const {
    if (!(kappa > 0.0)) {
      throw UsageError("compensation: kappa must be positive");
    }
    if (tau0 < 0) {
      throw UsageError("compensation: tau0 must be non-negative");
    }
    if (!(lambda > 0.0)) {
      throw UsageError("compensation: lambda must be positive");
    }
  }
};

/// Reversed sigmoid e^{-k(t - t0)} / (1 + e^{-k(t - t0)}), evaluated in the
/// branch that cannot overflow.
inline double compensation_factor(const CompensationConfig& cfg, std::int64_t tau) {
  const double z = cfg.kappa * static_cast<double>(tau - cfg.tau0);
  if (z >= 0.0) {
    const double e = std::exp(-z);
    return e / (1.0 + e);
  }
  return 1.0 / (1.0 + std::exp(z));
}

/// r(tau, h) = lambda · sigmoid_rev(tau) · h / |h|; the zero vector when h = 0.
inline ParamVector compensation(const CompensationConfig& cfg, std::int64_t tau, const ParamVector& h) {
  if (!cfg.enabled) {
    throw UsageError("compensation: called with compensation disabled");
  }
  cfg.validate();
  if (h.empty()) {
    throw StructuralError("compensation: empty direction");
  }
  const double norm = l2_norm(h);
  if (norm == 0.0) {
    return ParamVector(h.dim());
  }
  return scaled(cfg.lambda * compensation_factor(cfg, tau) / norm, h);
}

/// Quantize lambda·h + r on the grid 1/qp.
inline std::pair<QuantizedVector, std::vector<QuantizationErrorSample>>
quantized_step(const ParamVector& h, double lambda, const ParamVector& r, double qp, std::int64_t step_index = 0) {
  require_same_dim(h, r, "quantized_step");
  ParamVector input(h.dim());
  for (std::size_t i = 0; i < h.dim(); ++i) {
    input[i] = lambda * h[i] + r[i];
  }
  return quantize_vector(input, qp, step_index);
}

} // namespace qsgld
