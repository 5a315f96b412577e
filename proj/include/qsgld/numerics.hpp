#pragma once

// Flat-vector arithmetic, a reproducible random stream and the small set of
// statistics shared by the diagnostics.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <variant>
#include <vector>

#include "qsgld/error.hpp"

namespace qsgld {

/// Flat real-valued state vector. Entries stay finite through every
/// operation in this header; producing a NaN/Inf raises NumericalError.
class ParamVector {
public:
  ParamVector() = default;
  explicit ParamVector(std::size_t dim, double fill = 0.0) : values_(dim, fill) {}
  ParamVector(std::initializer_list<double> init) : values_(init) {}
  explicit ParamVector(std::vector<double> values) : values_(std::move(values)) {}

  std::size_t dim() const noexcept { return values_.size(); }
  bool empty() const noexcept { return values_.empty(); }

  double operator[](std::size_t i) const { return values_[i]; }
  double& operator[](std::size_t i) { return values_[i]; }

  std::span<const double> values() const noexcept { return values_; }
  std::span<double> values() noexcept { return values_; }
  const std::vector<double>& data() const noexcept { return values_; }

  auto begin() const noexcept { return values_.begin(); }
  auto end() const noexcept { return values_.end(); }
  auto begin() noexcept { return values_.begin(); }
  auto end() noexcept { return values_.end(); }

  bool all_finite() const noexcept {
    return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
  }

  friend bool operator==(const ParamVector&, const ParamVector&) = default;

private:
  std::vector<double> values_;
};

inline void require_same_dim(const ParamVector& a, const ParamVector& b, std::string_view what) {
  if (a.dim() != b.dim()) {
    throw StructuralError(std::string(what) + ": dimension mismatch (" + std::to_string(a.dim()) +
                          " vs " + std::to_string(b.dim()) + ")");
  }
}

inline void require_finite(const ParamVector& v, std::string_view what) {
  if (!v.all_finite()) {
    throw NumericalError(std::string(what) + ": non-finite entry");
  }
}

/// Neumaier-compensated sum.
inline double compensated_sum(std::span<const double> xs) noexcept {
  double sum = 0.0;
  double comp = 0.0;
  for (double x : xs) {
    const double t = sum + x;
    if (std::abs(sum) >= std::abs(x)) {
      comp += (sum - t) + x;
    } else {
      comp += (x - t) + sum;
    }
    sum = t;
  }
  return sum + comp;
}

/// Running Neumaier accumulator for streams that are not materialised.
class CompensatedAccumulator {
public:
  void add(double x) noexcept {
    const double t = sum_ + x;
    if (std::abs(sum_) >= std::abs(x)) {
      comp_ += (sum_ - t) + x;
    } else {
      comp_ += (x - t) + sum_;
    }
    sum_ = t;
  }
  double value() const noexcept { return sum_ + comp_; }

private:
  double sum_ = 0.0;
  double comp_ = 0.0;
};

/// a·x + y, elementwise.
inline ParamVector axpy(double a, const ParamVector& x, const ParamVector& y) {
  require_same_dim(x, y, "axpy");
  if (!std::isfinite(a)) {
    throw UsageError("axpy: scale must be finite");
  }
  ParamVector out(x.dim());
  for (std::size_t i = 0; i < x.dim(); ++i) {
    out[i] = a * x[i] + y[i];
  }
  require_finite(out, "axpy");
  return out;
}

inline ParamVector scaled(double a, const ParamVector& x) {
  ParamVector out(x.dim());
  for (std::size_t i = 0; i < x.dim(); ++i) {
    out[i] = a * x[i];
  }
  return out;
}

inline double dot(const ParamVector& x, const ParamVector& y) {
  require_same_dim(x, y, "dot");
  CompensatedAccumulator acc;
  for (std::size_t i = 0; i < x.dim(); ++i) {
    acc.add(x[i] * y[i]);
  }
  return acc.value();
}

/// Euclidean norm, scaled by the largest magnitude so it neither overflows
/// nor underflows.
inline double l2_norm(const ParamVector& x) {
  if (x.empty()) {
    throw StructuralError("l2_norm: empty vector");
  }
  double scale = 0.0;
  for (double v : x) {
    scale = std::max(scale, std::abs(v));
  }
  if (scale == 0.0) {
    return 0.0;
  }
  CompensatedAccumulator acc;
  for (double v : x) {
    const double s = v / scale;
    acc.add(s * s);
  }
  return scale * std::sqrt(acc.value());
}

inline double max_abs(const ParamVector& x) noexcept {
  double m = 0.0;
  for (double v : x) {
    m = std::max(m, std::abs(v));
  }
  return m;
}

/// Seeded generator stream. The generator is xoshiro256** seeded through
/// splitmix64; the same seed always yields the same sequence on every
/// platform. Normal variates use the Marsaglia polar method so they do not
/// depend on the standard library's distribution implementations.
class RngStream {
public:
  using result_type = std::uint64_t;
  static constexpr std::string_view algorithm_id = "xoshiro256**";

  explicit RngStream(std::uint64_t seed = 0) : seed_(seed) {
    std::uint64_t sm = seed;
    for (auto& word : state_) {
      word = splitmix64(sm);
    }
  }

  std::uint64_t seed() const noexcept { return seed_; }

  static constexpr result_type min() noexcept { return 0; }
  static constexpr result_type max() noexcept { return std::numeric_limits<result_type>::max(); }
  result_type operator()() noexcept { return next_u64(); }

  std::uint64_t next_u64() noexcept {
    const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
    const std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  /// Uniform on [0, 1) with 53 random bits.
  double uniform01() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform01(); }

  /// Unbiased integer in [0, n) by rejection.
  std::uint64_t index(std::uint64_t n) {
    if (n == 0) {
      throw UsageError("RngStream::index: empty range");
    }
    const std::uint64_t limit = max() - max() % n;
    std::uint64_t r = next_u64();
    while (r >= limit) {
      r = next_u64();
    }
    return r % n;
  }

  double normal() noexcept {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u = 0.0;
    double v = 0.0;
    double s = 0.0;
    do {
      u = 2.0 * uniform01() - 1.0;
      v = 2.0 * uniform01() - 1.0;
      s = u * u + v * v;
    } while (s >= 1.0 || s == 0.0);
    const double f = std::sqrt(-2.0 * std::log(s) / s);
    spare_ = v * f;
    has_spare_ = true;
    return u * f;
  }

  /// Independent child stream keyed by `stream_id`.
  RngStream split(std::uint64_t stream_id) const noexcept {
    std::uint64_t mix = seed_ ^ (0x9E3779B97F4A7C15ULL * (stream_id + 1));
    return RngStream(splitmix64(mix));
  }

  template <class T>
  void shuffle(std::vector<T>& items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(index(i));
      std::swap(items[i - 1], items[j]);
    }
  }

private:
  static constexpr std::uint64_t rotl(std::uint64_t x, int k) noexcept {
    return (x << k) | (x >> (64 - k));
  }
  static std::uint64_t splitmix64(std::uint64_t& x) noexcept {
    std::uint64_t z = (x += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  std::uint64_t seed_;
  std::uint64_t state_[4]{};
  double spare_ = 0.0;
  bool has_spare_ = false;
};

struct SampleStats {
  std::size_t count = 0;
  double mean = 0.0;
  double variance = 0.0; // unbiased
  double min = 0.0;
  double max = 0.0;

  double stddev() const noexcept { return std::sqrt(variance); }
  double stderr_of_mean() const noexcept {
    return count > 0 ? std::sqrt(variance / static_cast<double>(count)) : 0.0;
  }
};

/// Two-pass compensated estimates.
inline SampleStats sample_stats(std::span<const double> xs) {
  if (xs.empty()) {
    throw UsageError("sample_stats: no samples");
  }
  SampleStats st;
  st.count = xs.size();
  st.mean = compensated_sum(xs) / static_cast<double>(xs.size());
  CompensatedAccumulator sq;
  st.min = xs[0];
  st.max = xs[0];
  for (double x : xs) {
    const double d = x - st.mean;
    sq.add(d * d);
    st.min = std::min(st.min, x);
    st.max = std::max(st.max, x);
  }
  st.variance = xs.size() > 1 ? sq.value() / static_cast<double>(xs.size() - 1) : 0.0;
  // rounding can push the mean a hair outside [min, max] for constant input
  st.mean = std::clamp(st.mean, st.min, st.max);
  return st;
}

struct UniformDist {
  double lo = 0.0;
  double hi = 1.0;
};
struct StandardNormal {};
using ReferenceDist = std::variant<UniformDist, StandardNormal>;

inline double standard_normal_cdf(double x) noexcept {
  return 0.5 * std::erfc(-x / std::numbers::sqrt2);
}

inline double reference_cdf(const ReferenceDist& dist, double x) {
  if (const auto* u = std::get_if<UniformDist>(&dist)) {
    if (x <= u->lo) {
      return 0.0;
    }
    if (x >= u->hi) {
      return 1.0;
    }
    return (x - u->lo) / (u->hi - u->lo);
  }
  return standard_normal_cdf(x);
}

inline constexpr std::size_t kMinKsSamples = 10;

/// Kolmogorov–Smirnov sup-distance between the empirical CDF of `sorted`
/// (ascending) and the reference CDF.
inline double ks_statistic(std::span<const double> sorted, const ReferenceDist& dist) {
  if (sorted.size() < kMinKsSamples) {
    throw UsageError("ks_statistic: need at least " + std::to_string(kMinKsSamples) + " samples, got " +
                     std::to_string(sorted.size()));
  }
  if (!std::is_sorted(sorted.begin(), sorted.end())) {
    throw UsageError("ks_statistic: samples must be sorted ascending");
  }
  if (const auto* u = std::get_if<UniformDist>(&dist); u != nullptr && !(u->hi > u->lo)) {
    throw UsageError("ks_statistic: uniform reference needs lo < hi");
  }
  const double n = static_cast<double>(sorted.size());
  double d = 0.0;
  for (std::size_t i = 0; i < sorted.size(); ++i) {
    const double f = reference_cdf(dist, sorted[i]);
    d = std::max({d, static_cast<double>(i + 1) / n - f, f - static_cast<double>(i) / n});
  }
  return std::clamp(d, 0.0, 1.0);
}

/// Sample autocorrelation at `lag`; zero-variance series give 0.
inline double autocorrelation(std::span<const double> xs, std::size_t lag) {
  if (lag == 0) {
    throw UsageError("autocorrelation: lag must be positive");
  }
  if (lag + 1 >= xs.size()) {
    throw UsageError("autocorrelation: series of length " + std::to_string(xs.size()) +
                     " too short for lag " + std::to_string(lag));
  }
  const double mean = compensated_sum(xs) / static_cast<double>(xs.size());
  CompensatedAccumulator num;
  CompensatedAccumulator den;
  for (std::size_t t = 0; t < xs.size(); ++t) {
    const double d = xs[t] - mean;
    den.add(d * d);
    if (t + lag < xs.size()) {
      num.add(d * (xs[t + lag] - mean));
    }
  }
  if (den.value() <= 0.0) {
    return 0.0;
  }
  return std::clamp(num.value() / den.value(), -1.0, 1.0);
}

/// Ordinary least-squares slope of ys on xs.
inline double least_squares_slope(std::span<const double> xs, std::span<const double> ys) {
  if (xs.size() != ys.size() || xs.size() < 2) {
    throw UsageError("least_squares_slope: need two or more paired points");
  }
  const double n = static_cast<double>(xs.size());
  const double mx = compensated_sum(xs) / n;
  const double my = compensated_sum(ys) / n;
  double sxy = 0.0;
  double sxx = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    sxy += (xs[i] - mx) * (ys[i] - my);
    sxx += (xs[i] - mx) * (xs[i] - mx);
  }
  if (sxx == 0.0) {
    throw UsageError("least_squares_slope: degenerate abscissae");
  }
  return sxy / sxx;
}

} // namespace qsgld
