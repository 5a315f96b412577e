#pragma once

// Statistical checks of the quantization-noise model: white-noise test,
// conditional input/error correlation, CLT of epoch error sums, paralysis.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iostream>
#include <span>
#include <string>
#include <vector>

#include "qsgld/error.hpp"
#include "qsgld/numerics.hpp"
#include "qsgld/quantizer.hpp"

namespace qsgld {

inline constexpr std::size_t kMinWnhSamples = 1000;
inline constexpr std::size_t kMinCorrelationPairs = 10000;
inline constexpr std::size_t kMinCltSums = 1000;
inline constexpr std::int64_t kCltRegimeBatches = 32;

struct WnhThresholds {
  double ks = 0.02;
  double mean_z = 3.0;
  double var_tolerance = 0.02;
  double autocorr = 0.02;
  std::int64_t min_step = 0; // samples with step_index below this are ignored
  /// false: test realized errors eps/qp, which requires a single qp.
  bool normalized = true;
};

struct WnhReport {
  std::size_t n = 0;
  double uniform_ks = 0.0;
  double mean_z = 0.0;
  double var_ratio = 0.0;
  double lag1_autocorr = 0.0;
  bool pass = false;
};

inline WnhReport wnh_test(std::span<const QuantizationErrorSample> samples, const WnhThresholds& th = {}) {
  std::vector<double> xs;
  xs.reserve(samples.size());
  double qp = 0.0;
  for (const auto& s : samples) {
    if (s.step_index < th.min_step) {
      continue;
    }
    if (!th.normalized) {
      if (qp == 0.0) {
        qp = s.qp;
      } else if (s.qp != qp) {
        throw UsageError("wnh_test: realized errors with mixed qp; use normalized factors");
      }
      xs.push_back(s.realized());
    } else {
      xs.push_back(s.epsilon_factor);
    }
  }
  if (xs.size() < kMinWnhSamples) {
    throw UsageError("wnh_test: need at least " + std::to_string(kMinWnhSamples) + " samples, got " +
                     std::to_string(xs.size()));
  }
  const double scale = th.normalized ? 1.0 : 1.0 / qp; // grid spacing in sample units
  const double expected_var = kC0 * scale * scale;

  WnhReport r;
  r.n = xs.size();
  const auto st = sample_stats(xs);
  r.mean_z = st.mean / std::sqrt(expected_var / static_cast<double>(r.n));
  r.var_ratio = st.variance / expected_var;
  r.lag1_autocorr = autocorrelation(xs, 1);

  std::sort(xs.begin(), xs.end());
  r.uniform_ks = ks_statistic(xs, UniformDist{-0.5 * scale, 0.5 * scale});

  r.pass = r.uniform_ks < th.ks && std::abs(r.mean_z) < th.mean_z && std::abs(r.var_ratio - 1.0) < th.var_tolerance &&
           std::abs(r.lag1_autocorr) < th.autocorr;
  return r;
}

// ---------------------------------------------------------------------------
// Conditional correlation E[input·error | level k]

/// error = input − output (residual, positive convention); level is the grid
/// index the pair is conditioned on.
struct CorrelationPair {
  double input = 0.0;
  double error = 0.0;
  std::int64_t level = 0;
};

struct CorrelationReport {
  std::int64_t conditioned_level = 0;
  std::size_t n = 0;
  double correlation_estimate = 0.0;
  double stderr_estimate = 0.0;
  double predicted = 0.0;
  bool compensated = false;
  bool pass = false;
};

inline CorrelationReport correlation_test(std::span<const CorrelationPair> pairs, double qp, std::int64_t k,
                                          bool compensated, double band = 3.0) {
  require_valid_qp(qp);
  std::vector<double> prods;
  prods.reserve(pairs.size());
  for (const auto& p : pairs) {
    if (p.level == k) {
      prods.push_back(p.input * p.error);
    }
  }
  if (prods.size() < kMinCorrelationPairs) {
    throw UsageError("correlation_test: need at least " + std::to_string(kMinCorrelationPairs) +
                     " pairs at level " + std::to_string(k) + ", got " + std::to_string(prods.size()));
  }
  const auto st = sample_stats(prods);
  CorrelationReport r;
  r.conditioned_level = k;
  r.n = prods.size();
  r.correlation_estimate = st.mean;
  r.stderr_estimate = st.stderr_of_mean();
  r.compensated = compensated;
  r.predicted = compensated ? 0.0 : kC0 / (qp * qp);
  r.pass = std::abs(r.correlation_estimate - r.predicted) <= band * r.stderr_estimate;
  return r;
}

namespace detail {

inline double uniform_in_cell(double qp, std::int64_t k, RngStream& rng) {
  return (static_cast<double>(k) + rng.uniform(-0.5, 0.5)) / qp;
}

} // namespace detail

/// Inputs uniform over cell k, plain rounding.
inline std::vector<CorrelationPair> uncompensated_pairs(double qp, std::int64_t k, std::size_t n, RngStream& rng) {
  require_valid_qp(qp);
  std::vector<CorrelationPair> out(n);
  for (auto& p : out) {
    const double x = detail::uniform_in_cell(qp, k, rng);
    const auto q = quantize_scalar(x, qp);
    p = {x, x - q.value(), q.level};
  }
  return out;
}

/// Inputs uniform over cell k, quantized after adding uniform dither of one
/// grid width; error = input − dithered output, level = cell of the input.
inline std::vector<CorrelationPair> dithered_pairs(double qp, std::int64_t k, std::size_t n, RngStream& rng) {
  require_valid_qp(qp);
  std::vector<CorrelationPair> out(n);
  for (auto& p : out) {
    const double x = detail::uniform_in_cell(qp, k, rng);
    const double z = rng.uniform(-0.5, 0.5) / qp;
    const auto q = quantize_scalar(x + z, qp);
    p = {x, x - q.value(), k};
  }
  return out;
}

/// Paralysis-regime inputs (uniform over cell k) with compensation
/// r = lambda·sigmoid_rev(tau)·s, s an independent random sign and tau taken
/// at a uniformly random phase of the sigmoid transition (factor uniform on
/// (0, 1)). lambda·qp must be a positive integer. error = (x + r) − (x + r)^Q,
/// level = cell of the uncompensated input.
inline std::vector<CorrelationPair> compensated_pairs(double qp, std::int64_t k, std::size_t n, double lambda,
                                                      RngStream& rng) {
  require_valid_qp(qp);
  const double m = lambda * qp;
  if (!(m >= 1.0) || std::abs(m - std::round(m)) > 1e-9) {
    throw UsageError("compensated_pairs: lambda·qp must be a positive integer");
  }
  std::vector<CorrelationPair> out(n);
  for (auto& p : out) {
    const double x = detail::uniform_in_cell(qp, k, rng);
    const double factor = rng.uniform01();
    const double sign = (rng.next_u64() >> 63) != 0 ? 1.0 : -1.0;
    const double u = x + lambda * factor * sign;
    const auto q = quantize_scalar(u, qp);
    p = {x, u - q.value(), k};
  }
  return out;
}

// ---------------------------------------------------------------------------
// CLT of epoch error sums

struct CltReport {
  std::size_t n = 0;
  double ks_vs_normal = 0.0;
  bool pass = false;
  bool regime_warning = false; // b below the CLT regime
};

inline CltReport clt_test(std::span<const double> epoch_sums, std::int64_t b, double c0 = kC0, double threshold = 0.02) {
  if (b < 1) {
    throw UsageError("clt_test: b must be positive");
  }
  if (!(c0 > 0.0)) {
    throw UsageError("clt_test: c0 must be positive");
  }
  if (epoch_sums.size() < kMinCltSums) {
    throw UsageError("clt_test: need at least " + std::to_string(kMinCltSums) + " epoch sums, got " +
                     std::to_string(epoch_sums.size()));
  }
  CltReport r;
  r.n = epoch_sums.size();
  if (b < kCltRegimeBatches) {
    r.regime_warning = true;
    std::cerr << "warning: clt_test with b=" << b << " < " << kCltRegimeBatches << ", CLT regime not reached\n";
  }
  const double scale = 1.0 / std::sqrt(c0 * static_cast<double>(b));
  std::vector<double> z(epoch_sums.begin(), epoch_sums.end());
  for (double& v : z) {
    v *= scale;
  }
  std::sort(z.begin(), z.end());
  r.ks_vs_normal = ks_statistic(z, StandardNormal{});
  r.pass = r.ks_vs_normal < threshold;
  return r;
}

/// Sums of b independent uniform(-1/2, 1/2) factors, one per epoch.
inline std::vector<double> synthetic_epoch_sums(std::int64_t b, std::size_t epochs, RngStream& rng) {
  std::vector<double> out(epochs);
  for (auto& s : out) {
    CompensatedAccumulator acc;
    for (std::int64_t i = 0; i < b; ++i) {
      acc.add(rng.uniform(-0.5, 0.5));
    }
    s = acc.value();
  }
  return out;
}

// ---------------------------------------------------------------------------
// Early paralysis

struct ParalysisOptions {
  std::size_t dim = 4;
  std::size_t trials = 10000;
  std::int64_t tau = 0;
  std::int64_t tau0 = 1000000; // tau << tau0 keeps the sigmoid factor at 1
  double kappa = 2.0;
  std::uint64_t seed = 0;
};

/// Fraction of random small-gradient steps (coordinates of h uniform in
/// [-grad_scale, grad_scale]) whose quantized update is the zero vector.
inline double paralysis_probe(double qp, double lambda, double grad_scale, bool compensated,
                              const ParalysisOptions& opt = {}) {
  require_valid_qp(qp);
  if (!(lambda > 0.0) || !(grad_scale >= 0.0)) {
    throw UsageError("paralysis_probe: lambda must be positive and grad_scale non-negative");
  }
  if (!(grad_scale * lambda < 0.5 / qp)) {
    throw UsageError("paralysis_probe: grad_scale·lambda must stay below half a grid cell");
  }
  if (opt.dim == 0 || opt.trials == 0) {
    throw UsageError("paralysis_probe: dim and trials must be positive");
  }
  CompensationConfig cc;
  cc.kappa = opt.kappa;
  cc.tau0 = opt.tau0;
  cc.lambda = lambda;
  RngStream rng(opt.seed);
  std::size_t zero = 0;
  for (std::size_t t = 0; t < opt.trials; ++t) {
    ParamVector h(opt.dim);
    for (double& v : h) {
      v = rng.uniform(-grad_scale, grad_scale);
    }
    const ParamVector r = compensated ? compensation(cc, opt.tau, h) : ParamVector(opt.dim);
    const auto [q, errs] = quantized_step(h, lambda, r, qp, opt.tau);
    zero += q.is_zero() ? 1 : 0;
  }
  return static_cast<double>(zero) / static_cast<double>(opt.trials);
}

} // namespace qsgld
