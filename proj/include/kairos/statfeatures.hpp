#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <span>
#include <string_view>
#include <vector>

#include "kairos/preprocess.hpp"

// Deterministic statistical priors computed on the raw (pre-RevIN) valid
// region of each series. Every feature has a zero-variance convention so the
// extractor never produces NaN for finite input.

namespace kairos::features {

inline constexpr std::size_t kNumFeatures = 8;

inline constexpr std::array<std::string_view, kNumFeatures> kNames = {
    "acf1", "acf10ss", "spectral_entropy", "trend_strength", "seasonal_strength", "stability", "lumpiness",
    "crossing_rate"};

namespace detail {

inline double mean_of(std::span<const double> x) {
  double s = 0.0;
  for (double v : x) s += v;
  return x.empty() ? 0.0 : s / static_cast<double>(x.size());
}

/// Population variance.
inline double var_of(std::span<const double> x) {
  if (x.size() < 2) return 0.0;
  const double mu = mean_of(x);
  double s = 0.0;
  for (double v : x) s += (v - mu) * (v - mu);
  return s / static_cast<double>(x.size());
}

/// Variance small enough relative to the signal scale to count as zero.
inline bool negligible(double var, double scale) { return var <= 1e-24 * std::max(1.0, scale); }

}  // namespace detail

/// Sample autocorrelation at `lag` (demeaned, normalized by lag-0
/// autocovariance). Constant series -> 0.
inline double acf(std::span<const double> x, std::size_t lag) {
  const std::size_t n = x.size();
  if (lag == 0 || lag >= n) throw ContractError("acf: need 1 <= lag < length");
  const double mu = detail::mean_of(x);
  double c0 = 0.0;
  for (double v : x) c0 += (v - mu) * (v - mu);
  if (detail::negligible(c0 / static_cast<double>(n), mu * mu)) return 0.0;
  double ck = 0.0;
  for (std::size_t t = 0; t + lag < n; ++t) ck += (x[t] - mu) * (x[t + lag] - mu);
  return ck / c0;
}

/// Sum of squared autocorrelations over lags 1..10 (capped at length-1).
inline double acf10_sum_squares(std::span<const double> x) {
  double s = 0.0;
  for (std::size_t k = 1; k <= std::min<std::size_t>(10, x.size() - 1); ++k) {
    const double r = acf(x, k);
    s += r * r;
  }
  return s;
}

/// Normalized Shannon entropy of the periodogram over positive frequencies
/// 1..floor(n/2), computed with a direct DFT. Zero power -> 0.
inline double spectral_entropy(std::span<const double> x) {
  const std::size_t n = x.size();
  const std::size_t bins = n / 2;
  if (bins < 2) return 0.0;
  const double mu = detail::mean_of(x);
  std::vector<double> cosv(n), sinv(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double w = 2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(n);
    cosv[i] = std::cos(w);
    sinv[i] = std::sin(w);
  }
  std::vector<double> power(bins);
  double total = 0.0;
  for (std::size_t k = 1; k <= bins; ++k) {
    double re = 0.0, im = 0.0;
    std::size_t idx = 0;  // (k * t) mod n
    for (std::size_t t = 0; t < n; ++t) {
      const double v = x[t] - mu;
      re += v * cosv[idx];
      im -= v * sinv[idx];
      idx += k;
      if (idx >= n) idx -= n;
    }
    power[k - 1] = re * re + im * im;
    total += power[k - 1];
  }
  if (!(total > 1e-300) || detail::negligible(detail::var_of(x), mu * mu)) return 0.0;
  double h = 0.0;
  for (double p : power) {
    const double q = p / total;
    if (q > 0.0) h -= q * std::log(q);
  }
  return std::clamp(h / std::log(static_cast<double>(bins)), 0.0, 1.0);
}

/// Season length: the local ACF peak in [2, n/2] with the largest value above
/// max(0.1, 2.5/sqrt(n)); 8 when no such peak exists.
inline std::size_t detect_season(std::span<const double> x) {
  const std::size_t n = x.size();
  const double threshold = std::max(0.1, 2.5 / std::sqrt(static_cast<double>(n)));
  std::size_t best = 0;
  double best_val = threshold;
  if (n >= 6) {
    const std::size_t hi = n / 2;
    std::vector<double> r(hi + 2, 0.0);
    for (std::size_t k = 1; k <= std::min(hi + 1, n - 1); ++k) r[k] = acf(x, k);
    for (std::size_t k = 2; k <= hi; ++k) {
      const bool peak = r[k] > r[k - 1] && (k + 1 >= n || r[k] >= r[k + 1]);
      if (peak && r[k] > best_val) {
        best_val = r[k];
        best = k;
      }
    }
  }
  return best ? best : 8;
}

struct Strengths {
  double trend = 0.0;
  double seasonal = 0.0;
};

/// Classical additive decomposition x = T + S + R and the derived strengths.
///
/// T is a centred moving average of width m (2 x m for even m); S holds the
/// re-centred per-phase means of x - T; strengths are computed on the span
/// where T is defined. Series shorter than 2m+1 get seasonal strength 0 and a
/// trend window of min(7, n/2).
inline Strengths trend_seasonal_strength(std::span<const double> x, std::size_t m) {
  const std::size_t n = x.size();
  Strengths out;
  if (n < 3 || m < 2) return out;
  const bool seasonal = n >= 2 * m + 1;
  const std::size_t w = seasonal ? m : std::max<std::size_t>(2, std::min<std::size_t>(7, n / 2));

  // Centred moving average weights.
  std::vector<double> weights;
  if (w % 2 == 1) {
    weights.assign(w, 1.0 / static_cast<double>(w));
  } else {
    weights.assign(w + 1, 1.0 / static_cast<double>(w));
    weights.front() = weights.back() = 0.5 / static_cast<double>(w);
  }
  const std::size_t half = weights.size() / 2;
  if (n < weights.size()) return out;
  const std::size_t lo = half, hi = n - half;  // [lo, hi) where T is defined

  std::vector<double> trend(n, 0.0);
  for (std::size_t t = lo; t < hi; ++t) {
    double acc = 0.0;
    for (std::size_t j = 0; j < weights.size(); ++j) acc += weights[j] * x[t - half + j];
    trend[t] = acc;
  }

  std::vector<double> season(n, 0.0);
  if (seasonal) {
    std::vector<double> phase_sum(m, 0.0);
    std::vector<std::size_t> phase_n(m, 0);
    for (std::size_t t = lo; t < hi; ++t) {
      phase_sum[t % m] += x[t] - trend[t];
      ++phase_n[t % m];
    }
    std::vector<double> phase_mean(m, 0.0);
    double centre = 0.0;
    for (std::size_t k = 0; k < m; ++k) {
      phase_mean[k] = phase_n[k] ? phase_sum[k] / static_cast<double>(phase_n[k]) : 0.0;
      centre += phase_mean[k];
    }
    centre /= static_cast<double>(m);
    for (std::size_t t = 0; t < n; ++t) season[t] = phase_mean[t % m] - centre;
  }

  std::vector<double> rem, trend_rem, season_rem;
  for (std::size_t t = lo; t < hi; ++t) {
    const double r = x[t] - trend[t] - season[t];
    rem.push_back(r);
    trend_rem.push_back(trend[t] + r);
    season_rem.push_back(season[t] + r);
  }
  const double scale = detail::var_of(x);
  const double vr = detail::var_of(rem);
  auto strength = [&](double v) {
    if (detail::negligible(v, scale)) return 0.0;
    return std::clamp(1.0 - vr / v, 0.0, 1.0);
  };
  out.trend = strength(detail::var_of(trend_rem));
  out.seasonal = seasonal ? strength(detail::var_of(season_rem)) : 0.0;
  return out;
}

struct StabilityLumpiness {
  double stability = 0.0;
  double lumpiness = 0.0;
};

/// Variance of window means / window variances over non-overlapping windows
/// of `w` on the min-max scaled series (a trailing partial window is dropped).
inline StabilityLumpiness stability_lumpiness(std::span<const double> x, std::size_t w) {
  const std::size_t n = x.size();
  if (w == 0 || n < 2 * w) return {};
  const auto [mn, mx] = std::minmax_element(x.begin(), x.end());
  const double range = *mx - *mn;
  if (!(range > 0.0)) return {};
  std::vector<double> means, vars, window(w);
  for (std::size_t s = 0; s + w <= n; s += w) {
    for (std::size_t j = 0; j < w; ++j) window[j] = (x[s + j] - *mn) / range;
    means.push_back(detail::mean_of(window));
    vars.push_back(detail::var_of(window));
  }
  return {detail::var_of(means), detail::var_of(vars)};
}

/// Fraction of adjacent pairs that straddle the median.
inline double crossing_rate(std::span<const double> x) {
  const std::size_t n = x.size();
  if (n < 2) return 0.0;
  std::vector<double> sorted(x.begin(), x.end());
  std::sort(sorted.begin(), sorted.end());
  const double med = n % 2 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
  std::size_t crossings = 0;
  for (std::size_t t = 0; t + 1 < n; ++t) crossings += (x[t] <= med) != (x[t + 1] <= med);
  return static_cast<double>(crossings) / static_cast<double>(n - 1);
}

/// Window width for stability/lumpiness: max(8, floor(n/10)).
inline std::size_t tile_width(std::size_t n) { return std::max<std::size_t>(8, n / 10); }

/// The full K=8 vector, in `kNames` order.
inline std::array<double, kNumFeatures> feature_vector(std::span<const double> x) {
  std::array<double, kNumFeatures> f{};
  if (x.size() < 2) return f;
  f[0] = acf(x, 1);
  f[1] = acf10_sum_squares(x);
  f[2] = spectral_entropy(x);
  const auto ts = trend_seasonal_strength(x, detect_season(x));
  f[3] = ts.trend;
  f[4] = ts.seasonal;
  const auto sl = stability_lumpiness(x, tile_width(x.size()));
  f[5] = sl.stability;
  f[6] = sl.lumpiness;
  f[7] = crossing_rate(x);
  for (auto& v : f)
    if (!std::isfinite(v)) v = 0.0;
  return f;
}

/// Raw features for every series of the batch, [B x K]. Constant with respect
/// to all model parameters.
inline Tensor extract(const SeriesBatch& batch) {
  const std::size_t B = batch.batch_size();
  std::vector<double> out;
  out.reserve(B * kNumFeatures);
  for (std::size_t b = 0; b < B; ++b) {
    const auto f = feature_vector(batch.row(b));
    out.insert(out.end(), f.begin(), f.end());
  }
  return Tensor({B, kNumFeatures}, std::move(out));
}

/// Per-feature standardization fitted on a training split.
struct FeatureScaler {
  std::vector<double> mean;
  std::vector<double> stddev;

  static FeatureScaler fit(const Tensor& raw) {
    const std::size_t B = raw.dim(0), K = raw.dim(1);
    FeatureScaler s{std::vector<double>(K, 0.0), std::vector<double>(K, 0.0)};
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t k = 0; k < K; ++k) s.mean[k] += raw[b * K + k];
    for (auto& m : s.mean) m /= static_cast<double>(B);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t k = 0; k < K; ++k) s.stddev[k] += (raw[b * K + k] - s.mean[k]) * (raw[b * K + k] - s.mean[k]);
    for (auto& sd : s.stddev) {
      sd = std::sqrt(sd / static_cast<double>(B));
      if (!(sd > 1e-12)) sd = 1.0;
    }
    return s;
  }

  Tensor apply(const Tensor& raw) const {
    const std::size_t K = raw.dim(1);
    if (K != mean.size()) throw DimensionError("feature scaler fitted for a different feature count");
    std::vector<double> out(raw.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = (raw[i] - mean[i % K]) / stddev[i % K];
    return Tensor(raw.shape(), std::move(out));
  }
};

}  // namespace kairos::features
