#pragma once

// QSGLD/QSLD update loop and the baseline optimizers (SGD, ASGD, ADAM, ADAMW,
// NADAM, RADAM) behind one config/state pair.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "qsgld/error.hpp"
#include "qsgld/numerics.hpp"
#include "qsgld/objectives.hpp"
#include "qsgld/quantizer.hpp"

namespace qsgld {

enum class Algorithm { qsgld, qsld_adam, sgd, asgd, adam, adamw, nadam, radam };

inline constexpr Algorithm kAllAlgorithms[] = {Algorithm::qsgld, Algorithm::qsld_adam, Algorithm::sgd,
                                               Algorithm::asgd,  Algorithm::adam,      Algorithm::adamw,
                                               Algorithm::nadam, Algorithm::radam};

inline std::string to_string(Algorithm a) {
  switch (a) {
  case Algorithm::qsgld:
    return "qsgld";
  case Algorithm::qsld_adam:
    return "qsld-adam";
  case Algorithm::sgd:
    return "sgd";
  case Algorithm::asgd:
    return "asgd";
  case Algorithm::adam:
    return "adam";
  case Algorithm::adamw:
    return "adamw";
  case Algorithm::nadam:
    return "nadam";
  case Algorithm::radam:
    return "radam";
  }
  return "?";
}

inline Algorithm algorithm_from_string(const std::string& s) {
  for (auto a : kAllAlgorithms) {
    if (to_string(a) == s) {
      return a;
    }
  }
  throw UsageError("unknown algorithm '" + s + "'");
}

inline bool is_quantized(Algorithm a) noexcept { return a == Algorithm::qsgld || a == Algorithm::qsld_adam; }

inline bool uses_moments(Algorithm a) noexcept {
  return a == Algorithm::qsld_adam || a == Algorithm::adam || a == Algorithm::adamw || a == Algorithm::nadam ||
         a == Algorithm::radam;
}

struct OptimizerConfig {
  Algorithm algorithm = Algorithm::qsgld;
  double lambda = 0.01;
  QuantizationSchedule schedule{};
  CompensationConfig compensation{};
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  double psi = 0.004;

  bool quantized() const noexcept { return is_quantized(algorithm); }

  void validate() const {
    if (!(lambda > 0.0) || !std::isfinite(lambda)) {
      throw UsageError("optimizer: lambda must be positive");
    }
    if (!(beta1 > 0.0 && beta1 < 1.0) || !(beta2 > 0.0 && beta2 < 1.0)) {
      throw UsageError("optimizer: beta1 and beta2 must lie in (0, 1)");
    }
    if (!(eps > 0.0)) {
      throw UsageError("optimizer: eps must be positive");
    }
    if (!(weight_decay >= 0.0)) {
      throw UsageError("optimizer: weight_decay must be non-negative");
    }
    if (!std::isfinite(psi)) {
      throw UsageError("optimizer: psi must be finite");
    }
    if (quantized()) {
      schedule.validate();
      if (compensation.enabled) {
        compensation.validate();
      }
    }
  }
};

struct OptimizerState {
  ParamVector x;              // reported parameters (ASGD: the running average)
  QuantizedVector grid;       // quantized algorithms: x == grid.values()
  ParamVector inner;          // ASGD inner SGD iterate
  ParamVector m;
  ParamVector v;
  double mu_product = 1.0;    // NADAM running product of mu_i
  std::int64_t tau = 0;

  /// Point at which the next gradient is evaluated.
  const ParamVector& eval_point() const noexcept { return inner.empty() ? x : inner; }
};

inline void snap_to_grid(OptimizerState& state, double qp) {
  auto [q, errs] = quantize_vector(state.x, qp);
  (void)errs;
  state.grid = std::move(q);
  state.x = state.grid.values();
}

inline OptimizerState initial_state(const OptimizerConfig& cfg, const ParamVector& x0) {
  cfg.validate();
  if (x0.empty()) {
    throw StructuralError("optimizer: empty initial point");
  }
  require_finite(x0, "optimizer initial point");
  OptimizerState s;
  s.x = x0;
  if (uses_moments(cfg.algorithm)) {
    s.m = ParamVector(x0.dim());
    s.v = ParamVector(x0.dim());
  }
  if (cfg.algorithm == Algorithm::asgd) {
    s.inner = x0;
  }
  if (cfg.quantized()) {
    snap_to_grid(s, qp_at(cfg.schedule, 0));
  }
  return s;
}

namespace detail {

inline void update_moments(const OptimizerConfig& cfg, OptimizerState& s, const ParamVector& g) {
  for (std::size_t i = 0; i < g.dim(); ++i) {
    s.m[i] = cfg.beta1 * s.m[i] + (1.0 - cfg.beta1) * g[i];
    s.v[i] = cfg.beta2 * s.v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
  }
}

} // namespace detail

/// Descent direction h for the current step (tau counted from 1 inside the
/// bias corrections). Moment methods update m and v in place. For every
/// algorithm except ADAMW's decay term and ASGD's averaging, the plain
/// update is x + lambda·h.
inline ParamVector search_direction(const OptimizerConfig& cfg, OptimizerState& s, const ParamVector& grad) {
  require_same_dim(grad, s.x, "search_direction");
  if (!grad.all_finite()) {
    throw NumericalError("search_direction: non-finite gradient at step " + std::to_string(s.tau));
  }
  const auto n = grad.dim();
  const double t = static_cast<double>(s.tau + 1);
  ParamVector h(n);

  switch (cfg.algorithm) {
  case Algorithm::qsgld:
  case Algorithm::sgd:
  case Algorithm::asgd:
    for (std::size_t i = 0; i < n; ++i) {
      h[i] = -grad[i];
    }
    break;

  case Algorithm::qsld_adam:
  case Algorithm::adam:
  case Algorithm::adamw: {
    detail::update_moments(cfg, s, grad);
    const double bc1 = 1.0 - std::pow(cfg.beta1, t);
    const double bc2 = 1.0 - std::pow(cfg.beta2, t);
    for (std::size_t i = 0; i < n; ++i) {
      h[i] = -(s.m[i] / bc1) / (std::sqrt(s.v[i] / bc2) + cfg.eps);
    }
    break;
  }

  case Algorithm::nadam: {
    detail::update_moments(cfg, s, grad);
    const double mu = cfg.beta1 * (1.0 - 0.5 * std::pow(0.96, t * cfg.psi));
    const double mu_next = cfg.beta1 * (1.0 - 0.5 * std::pow(0.96, (t + 1.0) * cfg.psi));
    s.mu_product *= mu;
    const double bc2 = 1.0 - std::pow(cfg.beta2, t);
    const double cg = (1.0 - mu) / (1.0 - s.mu_product);
    const double cm = mu_next / (1.0 - s.mu_product * mu_next);
    for (std::size_t i = 0; i < n; ++i) {
      const double mhat = cm * s.m[i] + cg * grad[i];
      h[i] = -mhat / (std::sqrt(s.v[i] / bc2) + cfg.eps);
    }
    break;
  }

  case Algorithm::radam: {
    detail::update_moments(cfg, s, grad);
    const double b2t = std::pow(cfg.beta2, t);
    const double bc1 = 1.0 - std::pow(cfg.beta1, t);
    const double bc2 = 1.0 - b2t;
    const double rho_inf = 2.0 / (1.0 - cfg.beta2) - 1.0;
    const double rho = rho_inf - 2.0 * t * b2t / bc2;
    if (rho > 5.0) {
      const double rect =
          std::sqrt((rho - 4.0) * (rho - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho));
      for (std::size_t i = 0; i < n; ++i) {
        h[i] = -(s.m[i] / bc1) * rect * std::sqrt(bc2) / (std::sqrt(s.v[i]) + cfg.eps);
      }
    } else {
      for (std::size_t i = 0; i < n; ++i) {
        h[i] = -s.m[i] / bc1;
      }
    }
    break;
  }
  }
  return h;
}

/// One update. Quantized algorithms append their error factors to `sink`.
inline void step(const OptimizerConfig& cfg, OptimizerState& s, const ParamVector& grad, ErrorSink* sink = nullptr) {
  require_same_dim(grad, s.x, "step");
  if (s.tau < 0) {
    throw UsageError("step: negative step counter");
  }

  if (cfg.quantized()) {
    const double qp = qp_at(cfg.schedule, s.tau);
    if (s.grid.dim() != s.x.dim() || s.grid.qp != qp) {
      snap_to_grid(s, qp);
    }
    const auto h = search_direction(cfg, s, grad);
    ParamVector r(h.dim());
    if (cfg.compensation.enabled) {
      auto cc = cfg.compensation;
      cc.lambda = cfg.lambda;
      r = compensation(cc, s.tau, h);
    }
    auto [dq, errs] = quantized_step(h, cfg.lambda, r, qp, s.tau);
    for (std::size_t i = 0; i < s.grid.dim(); ++i) {
      const auto next = s.grid.levels[i] + dq.levels[i];
      if (static_cast<double>(next < 0 ? -next : next) >= kMaxGridIndex) {
        throw RangeError("step: grid index overflow at coordinate " + std::to_string(i));
      }
      s.grid.levels[i] = next;
    }
    s.x = s.grid.values();
    if (sink != nullptr) {
      sink->record(errs);
    }
    ++s.tau;
    return;
  }

  const auto h = search_direction(cfg, s, grad);
  switch (cfg.algorithm) {
  case Algorithm::asgd: {
    s.inner = axpy(cfg.lambda, h, s.inner);
    const double k = static_cast<double>(s.tau + 1);
    for (std::size_t i = 0; i < s.x.dim(); ++i) {
      s.x[i] = s.tau == 0 ? s.inner[i] : s.x[i] + (s.inner[i] - s.x[i]) / k;
    }
    break;
  }
  case Algorithm::adamw: {
    ParamVector next(s.x.dim());
    for (std::size_t i = 0; i < s.x.dim(); ++i) {
      next[i] = s.x[i] + cfg.lambda * (h[i] - cfg.weight_decay * s.x[i]);
    }
    s.x = std::move(next);
    break;
  }
  default:
    s.x = axpy(cfg.lambda, h, s.x);
    break;
  }
  if (!s.x.all_finite()) {
    throw NumericalError("step: non-finite parameters after step " + std::to_string(s.tau));
  }
  ++s.tau;
}

// ---------------------------------------------------------------------------
// Run loop

struct TrajectoryRecord {
  std::int64_t epoch = 0;
  double train_loss = 0.0;
  std::optional<double> eval_loss;
  std::optional<double> accuracy;
  std::optional<double> qp;        // quantized algorithms only
  double grad_norm = 0.0;          // mean mini-batch gradient norm
  std::optional<double> error_sum; // sum of error factors over the epoch
  std::int64_t wall_ms = 0;
  bool diverged = false;
};

struct RunResult {
  std::vector<TrajectoryRecord> records;
  ParamVector final_params;
  bool diverged = false;
  std::string message; // diagnostic when diverged
};

inline constexpr double kDivergenceLoss = 1e12;

namespace detail {

/// Sums the epoch's error factors and forwards to the caller's sink.
class EpochErrorTee final : public ErrorSink {
public:
  explicit EpochErrorTee(ErrorSink* next) : next_(next) {}

  void record(std::span<const QuantizationErrorSample> samples) override {
    for (const auto& e : samples) {
      sum_.add(e.epsilon_factor);
    }
    if (next_ != nullptr) {
      next_->record(samples);
    }
  }

  double take() noexcept {
    const double v = sum_.value();
    sum_ = {};
    return v;
  }

private:
  ErrorSink* next_;
  CompensatedAccumulator sum_;
};

inline bool loss_diverged(double v) noexcept { return !std::isfinite(v) || v > kDivergenceLoss; }

} // namespace detail

/// Executes epochs·B steps, one record per epoch. The schedule's
/// batches_per_epoch is taken from the objective. Randomness (batch order,
/// gradient noise) comes from streams split off `rng`.
inline RunResult run(OptimizerConfig cfg, Objective& objective, const ParamVector& x0, std::int64_t epochs,
                     const RngStream& rng, ErrorSink* sink = nullptr) {
  if (x0.dim() != objective.dim()) {
    throw StructuralError("run: x0 has dimension " + std::to_string(x0.dim()) + ", objective expects " +
                          std::to_string(objective.dim()));
  }
  if (epochs < 0) {
    throw UsageError("run: epochs must be non-negative");
  }
  const auto batches = static_cast<std::int64_t>(objective.batch_count());
  cfg.schedule.batches_per_epoch = batches;
  auto state = initial_state(cfg, x0);

  RngStream batch_rng = rng.split(1);
  RngStream noise_rng = rng.split(2);
  detail::EpochErrorTee tee(sink);

  RunResult result;
  const auto flag = [&](std::int64_t epoch, double loss, std::string why, std::int64_t started) {
    TrajectoryRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss;
    rec.diverged = true;
    if (cfg.quantized()) {
      rec.qp = qp_at(cfg.schedule, epoch * batches);
    }
    rec.wall_ms = started;
    result.records.push_back(rec);
    result.diverged = true;
    result.message = std::move(why);
  };

  for (std::int64_t epoch = 0; epoch < epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto elapsed = [&] {
      return std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - t0).count();
    };
    objective.begin_epoch(batch_rng);
    CompensatedAccumulator grad_norms;
    try {
      for (std::int64_t b = 0; b < batches; ++b) {
        const auto lg = objective.batch_loss_grad(static_cast<std::size_t>(b), state.eval_point(), noise_rng);
        if (detail::loss_diverged(lg.value)) {
          flag(epoch, lg.value, "loss " + std::to_string(lg.value) + " at step " + std::to_string(state.tau),
               elapsed());
          break;
        }
        grad_norms.add(lg.grad.all_finite() ? l2_norm(lg.grad) : std::nan(""));
        step(cfg, state, lg.grad, &tee);
      }
    } catch (const NumericalError& e) {
      flag(epoch, std::nan(""), e.what(), elapsed());
    } catch (const RangeError& e) {
      flag(epoch, std::nan(""), e.what(), elapsed());
    }
    if (result.diverged) {
      break;
    }

    TrajectoryRecord rec;
    rec.epoch = epoch;
    rec.train_loss = objective.loss(state.x);
    rec.eval_loss = objective.eval_loss(state.x);
    rec.accuracy = objective.accuracy(state.x);
    rec.grad_norm = grad_norms.value() / static_cast<double>(batches);
    if (cfg.quantized()) {
      rec.qp = qp_at(cfg.schedule, epoch * batches);
      rec.error_sum = tee.take();
    }
    rec.wall_ms = elapsed();
    if (detail::loss_diverged(rec.train_loss)) {
      flag(epoch, rec.train_loss, "training loss " + std::to_string(rec.train_loss) + " after epoch " +
                                      std::to_string(epoch), rec.wall_ms);
      break;
    }
    result.records.push_back(rec);
  }
  result.final_params = state.x;
  return result;
}

} // namespace qsgld
