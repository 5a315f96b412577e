#pragma once

// Euler-Maruyama reference for dX = -grad f(X) dt + sqrt(C_q)·sigma(t) dB and
// a Monte-Carlo weak-error scan of QSGLD against the closed-form OU moments.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "qsgld/error.hpp"
#include "qsgld/numerics.hpp"
#include "qsgld/objectives.hpp"
#include "qsgld/optimizers.hpp"
#include "qsgld/quantizer.hpp"

namespace qsgld {

struct SdeConfig {
  double cq = 1.0;
  std::function<double(double)> sigma_fn = [](double) { return 1.0; };
  double dt = 1e-3;
  double horizon = 1.0;

  void validate() const {
    if (!(cq >= 0.0) || !std::isfinite(cq)) {
      throw UsageError("sde: C_q must be non-negative");
    }
    if (!(dt > 0.0)) {
      throw UsageError("sde: dt must be positive");
    }
    if (!(horizon >= dt)) {
      throw UsageError("sde: horizon must be at least dt");
    }
    if (!sigma_fn) {
      throw UsageError("sde: sigma_fn is empty");
    }
  }

  std::int64_t steps() const { return static_cast<std::int64_t>(std::llround(horizon / dt)); }
};

/// sigma(t) = b^{-pbar(t_e)} with the exponent frozen per epoch of length
/// `epoch_time`.
inline std::function<double(double)> epoch_frozen_sigma(const QuantizationSchedule& s, double epoch_time) {
  if (!(epoch_time > 0.0)) {
    throw UsageError("epoch_frozen_sigma: epoch_time must be positive");
  }
  return [s, epoch_time](double t) {
    const auto epoch = static_cast<std::int64_t>(std::floor(t / epoch_time));
    return std::pow(static_cast<double>(s.base), -power_exponent(s, epoch * s.batches_per_epoch));
  };
}

/// Euler-Maruyama driven by explicit Brownian increments `dw` (steps × d,
/// row-major, each with variance dt).
inline ParamVector simulate_sde_increments(const SdeConfig& cfg, const Objective& objective, const ParamVector& x0,
                                           std::span<const double> dw) {
  cfg.validate();
  if (x0.dim() != objective.dim()) {
    throw StructuralError("simulate_sde: x0 dimension does not match objective");
  }
  const auto d = x0.dim();
  const auto n = static_cast<std::size_t>(cfg.steps());
  if (dw.size() != n * d) {
    throw StructuralError("simulate_sde: expected " + std::to_string(n * d) + " increments, got " +
                          std::to_string(dw.size()));
  }
  const double sq = std::sqrt(cfg.cq);
  ParamVector x = x0;
  for (std::size_t k = 0; k < n; ++k) {
    const double t = static_cast<double>(k) * cfg.dt;
    const double diff = sq * cfg.sigma_fn(t);
    const auto g = objective.full_loss_grad(x).grad;
    for (std::size_t i = 0; i < d; ++i) {
      x[i] += -g[i] * cfg.dt + diff * dw[k * d + i];
    }
    if (!x.all_finite()) {
      throw NumericalError("simulate_sde: non-finite state at t = " + std::to_string(t));
    }
  }
  return x;
}

inline std::vector<double> brownian_increments(std::int64_t steps, std::size_t d, double dt, RngStream& rng) {
  std::vector<double> dw(static_cast<std::size_t>(steps) * d);
  const double s = std::sqrt(dt);
  for (double& w : dw) {
    w = s * rng.normal();
  }
  return dw;
}

/// Pairwise sums of fine increments: the same Brownian path at twice the step.
inline std::vector<double> coarsen_increments(std::span<const double> fine, std::size_t d) {
  const std::size_t n = fine.size() / d;
  if (fine.size() % d != 0 || n % 2 != 0) {
    throw StructuralError("coarsen_increments: need an even number of steps");
  }
  std::vector<double> out((n / 2) * d);
  for (std::size_t k = 0; k < n / 2; ++k) {
    for (std::size_t i = 0; i < d; ++i) {
      out[k * d + i] = fine[2 * k * d + i] + fine[(2 * k + 1) * d + i];
    }
  }
  return out;
}

inline ParamVector simulate_sde(const SdeConfig& cfg, const Objective& objective, const ParamVector& x0,
                                RngStream& rng) {
  cfg.validate();
  const auto dw = brownian_increments(cfg.steps(), x0.dim(), cfg.dt, rng);
  return simulate_sde_increments(cfg, objective, x0, dw);
}

/// E X_t^2 for dX = -X dt + sigma dB, X_0 = x0.
inline double ou_second_moment(double t, double x0, double sigma) {
  if (!(t >= 0.0)) {
    throw UsageError("ou_second_moment: t must be non-negative");
  }
  const double e = std::exp(-2.0 * t);
  return x0 * x0 * e + 0.5 * sigma * sigma * (1.0 - e);
}

inline double ou_mean(double t, double x0) {
  if (!(t >= 0.0)) {
    throw UsageError("ou_mean: t must be non-negative");
  }
  return x0 * std::exp(-t);
}

/// Second moment after consecutive segments (duration, sigma), starting from
/// E X_0^2 = m0.
inline double ou_second_moment_chain(double m0, std::span<const std::pair<double, double>> segments) {
  double m = m0;
  for (const auto& [dur, sigma] : segments) {
    const double e = std::exp(-2.0 * dur);
    m = m * e + 0.5 * sigma * sigma * (1.0 - e);
  }
  return m;
}

// ---------------------------------------------------------------------------
// Weak-error scan

enum class TestFunction { squared_norm, first_coord, constant };

inline std::string to_string(TestFunction g) {
  switch (g) {
  case TestFunction::squared_norm:
    return "x^2";
  case TestFunction::first_coord:
    return "x1";
  case TestFunction::constant:
    return "const";
  }
  return "?";
}

inline TestFunction test_function_from_string(const std::string& s) {
  if (s == "x^2" || s == "x2" || s == "squared_norm") {
    return TestFunction::squared_norm;
  }
  if (s == "x1" || s == "first_coord") {
    return TestFunction::first_coord;
  }
  if (s == "const" || s == "constant") {
    return TestFunction::constant;
  }
  throw UsageError("unknown test function '" + s + "'");
}

inline double apply_test_function(TestFunction g, const ParamVector& x) {
  switch (g) {
  case TestFunction::squared_norm:
    return dot(x, x);
  case TestFunction::first_coord:
    return x[0];
  case TestFunction::constant:
    return 1.0;
  }
  return 0.0;
}

inline constexpr std::int64_t kMinWeakErrorSeeds = 1000;

struct WeakErrorConfig {
  TestFunction test_fn = TestFunction::squared_norm;
  std::vector<double> lambdas{1.0 / 8, 1.0 / 16, 1.0 / 32};
  std::int64_t seeds = 10000;
  double horizon = 1.0; // whole epochs of unit time
  double cq = 0.1;
  double x0 = 3.0;
  /// Per-step gradient-noise std as a fraction of the grid spacing; the
  /// resulting noise variance per unit time (12·dither²·C_q) does not depend
  /// on lambda and is folded into the reference diffusion.
  double dither = 0.5;
  std::uint64_t seed = 0;
  unsigned threads = 1;
};

struct WeakErrorReport {
  TestFunction test_fn = TestFunction::squared_norm;
  std::vector<double> lambdas;
  std::vector<double> errors;
  std::vector<double> stderrs;
  std::vector<double> estimates;
  std::vector<double> references;
  std::vector<double> qps;
  double fitted_order = 0.0;
};

/// For each lambda: QSGLD on the 1D quadratic with B = 1/lambda batches per
/// epoch, constant Q_p = unit_time_qp(lambda, C_q), run to the horizon over
/// `seeds` paths; E g compared with the OU closed form. Path k uses the same
/// stream for every lambda (common random numbers).
inline WeakErrorReport weak_error_scan(const WeakErrorConfig& cfg) {
  if (cfg.lambdas.size() < 3) {
    throw UsageError("weak_error_scan: need at least 3 lambda values");
  }
  for (std::size_t i = 0; i < cfg.lambdas.size(); ++i) {
    if (!(cfg.lambdas[i] > 0.0 && cfg.lambdas[i] <= 1.0)) {
      throw UsageError("weak_error_scan: lambda must lie in (0, 1]");
    }
    if (i > 0 && !(cfg.lambdas[i] < cfg.lambdas[i - 1])) {
      throw UsageError("weak_error_scan: lambdas must be strictly decreasing");
    }
  }
  if (cfg.seeds < kMinWeakErrorSeeds) {
    throw UsageError("weak_error_scan: need at least " + std::to_string(kMinWeakErrorSeeds) + " seeds, got " +
                     std::to_string(cfg.seeds));
  }
  const double epochs_real = std::round(cfg.horizon);
  if (!(cfg.horizon > 0.0) || std::abs(cfg.horizon - epochs_real) > 1e-12) {
    throw UsageError("weak_error_scan: horizon must be a positive whole number of unit-time epochs");
  }
  if (!(cfg.cq > 0.0) || !(cfg.dither >= 0.0)) {
    throw UsageError("weak_error_scan: C_q must be positive and dither non-negative");
  }
  const auto epochs = static_cast<std::int64_t>(epochs_real);

  WeakErrorReport report;
  report.test_fn = cfg.test_fn;
  report.lambdas = cfg.lambdas;
  const RngStream root(cfg.seed);

  for (double lambda : cfg.lambdas) {
    const double inv = 1.0 / lambda;
    const auto batches = static_cast<std::size_t>(std::llround(inv));
    if (std::abs(inv - static_cast<double>(batches)) > 1e-9) {
      throw UsageError("weak_error_scan: 1/lambda must be an integer");
    }
    const double qp = unit_time_qp(lambda, cfg.cq);
    const double noise = cfg.dither * std::sqrt(12.0 * cfg.cq / lambda);

    OptimizerConfig oc;
    oc.algorithm = Algorithm::qsgld;
    oc.lambda = lambda;
    oc.schedule.kind = ScheduleKind::constant;
    oc.schedule.eta = qp;
    oc.compensation.enabled = false;

    std::vector<double> values(static_cast<std::size_t>(cfg.seeds));
    const unsigned workers = std::max(1u, std::min<unsigned>(cfg.threads, static_cast<unsigned>(cfg.seeds)));
    const auto work = [&](unsigned w) {
      AnalyticObjective obj(AnalyticKind::quadratic, 1, batches, noise);
      for (auto k = static_cast<std::int64_t>(w); k < cfg.seeds; k += workers) {
        const auto res = run(oc, obj, ParamVector{cfg.x0}, epochs, root.split(static_cast<std::uint64_t>(k)));
        if (res.diverged) {
          throw NumericalError("weak_error_scan: path diverged: " + res.message);
        }
        values[static_cast<std::size_t>(k)] = apply_test_function(cfg.test_fn, res.final_params);
      }
    };
    if (workers == 1) {
      work(0);
    } else {
      std::vector<std::thread> pool;
      std::vector<std::exception_ptr> failures(workers);
      for (unsigned w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
          try {
            work(w);
          } catch (...) {
            failures[w] = std::current_exception();
          }
        });
      }
      for (auto& t : pool) {
        t.join();
      }
      for (auto& f : failures) {
        if (f) {
          std::rethrow_exception(f);
        }
      }
    }

    const double x0q = quantize_scalar(cfg.x0, qp).value();
    const double sigma = std::sqrt(cfg.cq + lambda * noise * noise);
    double reference = 1.0;
    if (cfg.test_fn == TestFunction::squared_norm) {
      reference = ou_second_moment(cfg.horizon, x0q, sigma);
    } else if (cfg.test_fn == TestFunction::first_coord) {
      reference = ou_mean(cfg.horizon, x0q);
    }
    const auto st = sample_stats(values);
    report.qps.push_back(qp);
    report.estimates.push_back(st.mean);
    report.references.push_back(reference);
    report.errors.push_back(std::abs(st.mean - reference));
    report.stderrs.push_back(st.stderr_of_mean());
  }

  bool all_positive = true;
  for (double e : report.errors) {
    all_positive = all_positive && e > 0.0;
  }
  if (all_positive) {
    std::vector<double> lx;
    std::vector<double> ly;
    for (std::size_t i = 0; i < report.errors.size(); ++i) {
      lx.push_back(std::log(report.lambdas[i]));
      ly.push_back(std::log(report.errors[i]));
    }
    report.fitted_order = least_squares_slope(lx, ly);
  }
  return report;
}

/// Errors nonincreasing in decreasing lambda, allowing each rise up to
/// `band` combined standard errors.
inline bool errors_monotone(const WeakErrorReport& r, double band = 2.0) {
  for (std::size_t i = 1; i < r.errors.size(); ++i) {
    const double se = std::hypot(r.stderrs[i], r.stderrs[i - 1]);
    if (r.errors[i] > r.errors[i - 1] + band * se) {
      return false;
    }
  }
  return true;
}

} // namespace qsgld
