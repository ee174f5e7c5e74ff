#include <cmath>
#include <numbers>

#include "catch_amalgamated.hpp"
#include "kairos/statfeatures.hpp"

using namespace kairos;
using namespace kairos::features;
using Catch::Matchers::WithinAbs;

namespace {

std::vector<double> alternating(std::size_t n) {
  std::vector<double> x(n);
  for (std::size_t i = 0; i < n; ++i) x[i] = i % 2 ? -1.0 : 1.0;
  return x;
}

std::vector<double> ramp(std::size_t n) {
  std::vector<double> x(n);
  for (std::size_t i = 0; i < n; ++i) x[i] = 0.5 * static_cast<double>(i) - 3.0;
  return x;
}

std::vector<double> noise(std::size_t n, Rng& rng) {
  std::vector<double> x(n);
  for (auto& v : x) v = rng.normal();
  return x;
}

std::vector<double> ar1(std::size_t n, double phi, Rng& rng) {
  std::vector<double> x(n);
  double s = rng.normal() / std::sqrt(1 - phi * phi);
  for (auto& v : x) v = s = phi * s + rng.normal();
  return x;
}

double naive_acf(const std::vector<double>& x, std::size_t k) {
  double mu = 0.0;
  for (double v : x) mu += v;
  mu /= static_cast<double>(x.size());
  double num = 0.0, den = 0.0;
  for (std::size_t t = 0; t < x.size(); ++t) {
    den += (x[t] - mu) * (x[t] - mu);
    if (t + k < x.size()) num += (x[t] - mu) * (x[t + k] - mu);
  }
  return num / den;
}

SeriesBatch batch_of(const std::vector<std::vector<double>>& rows, std::size_t L) {
  std::vector<double> v(rows.size() * L, 0.0);
  std::vector<std::uint8_t> valid(rows.size() * L, 0);
  for (std::size_t b = 0; b < rows.size(); ++b)
    for (std::size_t t = 0; t < rows[b].size(); ++t) {
      v[b * L + t] = rows[b][t];
      valid[b * L + t] = 1;
    }
  return {Tensor({rows.size(), L}, v), valid, std::nullopt};
}

void check_ranges(const std::array<double, kNumFeatures>& f) {
  for (double v : f) REQUIRE(std::isfinite(v));
  REQUIRE(f[0] >= -1.0);
  REQUIRE(f[0] <= 1.0);
  REQUIRE(f[1] >= 0.0);
  for (std::size_t i : {2u, 3u, 4u, 7u}) {
    REQUIRE(f[i] >= 0.0);
    REQUIRE(f[i] <= 1.0);
  }
  REQUIRE(f[5] >= 0.0);
  REQUIRE(f[6] >= 0.0);
}

}  // namespace

TEST_CASE("feature names are fixed") {
  CHECK(kNumFeatures == 8);
  CHECK(kNames[0] == "acf1");
  CHECK(kNames[4] == "seasonal_strength");
  CHECK(kNames[7] == "crossing_rate");
}

TEST_CASE("acf examples") {
  const auto alt = alternating(64);
  CHECK_THAT(acf(alt, 1), WithinAbs(-1.0, 1.0 / 64));
  CHECK(acf(std::vector<double>(20, 3.0), 1) == 0.0);
  CHECK(acf10_sum_squares(std::vector<double>(20, 3.0)) == 0.0);
  Rng rng(1);
  const auto x = ar1(2048, 0.9, rng);
  CHECK_THAT(acf(x, 1), WithinAbs(0.9, 0.05));
  CHECK_THROWS_AS(acf(x, 0), ContractError);
  CHECK_THROWS_AS(acf(std::vector<double>(3, 1.0), 3), ContractError);
}

TEST_CASE("acf agrees with the direct formula") {
  Rng rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    const auto x = noise(10 + rng.below(50), rng);
    double ss = 0.0;
    for (std::size_t k = 1; k <= std::min<std::size_t>(10, x.size() - 1); ++k) {
      CHECK_THAT(acf(x, k), WithinAbs(naive_acf(x, k), 1e-12));
      ss += naive_acf(x, k) * naive_acf(x, k);
    }
    CHECK_THAT(acf10_sum_squares(x), WithinAbs(ss, 1e-12));
  }
  // lags capped at length - 1
  const std::vector<double> shortx{1, 3, 2, 5};
  double ss = 0.0;
  for (std::size_t k = 1; k <= 3; ++k) ss += naive_acf(shortx, k) * naive_acf(shortx, k);
  CHECK_THAT(acf10_sum_squares(shortx), WithinAbs(ss, 1e-12));
}

TEST_CASE("spectral entropy examples") {
  std::vector<double> s(256);
  for (std::size_t i = 0; i < s.size(); ++i) s[i] = std::sin(2 * std::numbers::pi * 8.0 * static_cast<double>(i) / 256.0);
  CHECK(spectral_entropy(s) <= 0.05);
  Rng rng(3);
  CHECK(spectral_entropy(noise(4096, rng)) >= 0.9);
  CHECK(spectral_entropy(std::vector<double>(64, -2.0)) == 0.0);
}

TEST_CASE("trend and seasonal strength examples") {
  const auto r = trend_seasonal_strength(ramp(200), detect_season(ramp(200)));
  CHECK(r.trend >= 0.99);
  CHECK_THAT(r.seasonal, WithinAbs(0.0, 1e-6));

  std::vector<double> sq(256);
  for (std::size_t i = 0; i < sq.size(); ++i) sq[i] = (i % 8) < 4 ? 1.0 : -1.0;
  CHECK(detect_season(sq) == 8);
  CHECK(trend_seasonal_strength(sq, 8).seasonal >= 0.99);

  Rng rng(4);
  for (int trial = 0; trial < 5; ++trial) {
    const auto x = noise(512, rng);
    const auto ts = trend_seasonal_strength(x, detect_season(x));
    CHECK(ts.trend <= 0.2);
    CHECK(ts.seasonal <= 0.2);
  }
}

TEST_CASE("short series fall back to a small trend window") {
  const auto ts = trend_seasonal_strength(ramp(10), 8);
  CHECK(ts.seasonal == 0.0);
  CHECK(ts.trend >= 0.99);
}

TEST_CASE("season detection falls back to one patch") {
  Rng rng(5);
  CHECK(detect_season(std::vector<double>(40, 1.0)) == 8);
  CHECK(detect_season(std::vector<double>{1, 2, 3}) == 8);
  std::vector<double> s(120);
  for (std::size_t i = 0; i < s.size(); ++i) s[i] = std::sin(2 * std::numbers::pi * static_cast<double>(i) / 12.0);
  CHECK(detect_season(s) == 12);
}

TEST_CASE("stability and lumpiness examples") {
  const auto c = stability_lumpiness(std::vector<double>(64, 2.0), 8);
  CHECK(c.stability == 0.0);
  CHECK(c.lumpiness == 0.0);

  std::vector<double> step(64, 0.0);
  std::fill(step.begin() + 32, step.end(), 5.0);
  const auto s = stability_lumpiness(step, 8);
  CHECK_THAT(s.stability, WithinAbs(0.25, 1e-15));
  CHECK_THAT(s.lumpiness, WithinAbs(0.0, 1e-15));

  Rng rng(6);
  const auto n = stability_lumpiness(noise(400, rng), 40);
  CHECK(n.lumpiness > 0.0);
  CHECK(n.lumpiness < 0.01);

  const auto tooshort = stability_lumpiness(noise(10, rng), 8);
  CHECK(tooshort.stability == 0.0);
  CHECK(tooshort.lumpiness == 0.0);
}

TEST_CASE("crossing rate examples") {
  CHECK_THAT(crossing_rate(alternating(50)), WithinAbs(1.0, 1e-15));
  CHECK_THAT(crossing_rate(ramp(31)), WithinAbs(1.0 / 30.0, 1e-15));
  CHECK_THAT(crossing_rate(ramp(40)), WithinAbs(1.0 / 39.0, 1e-15));
  CHECK(crossing_rate(std::vector<double>(9, 4.0)) == 0.0);
}

TEST_CASE("tile width") {
  CHECK(tile_width(50) == 8);
  CHECK(tile_width(256) == 25);
}

TEST_CASE("features are finite on edge inputs") {
  for (const auto& x : {std::vector<double>{1.0, 1.0}, std::vector<double>{0.0, 1.0}, std::vector<double>(300, 7.0),
                        alternating(2), alternating(3), alternating(257), std::vector<double>{1e9, -1e9, 1e9},
                        std::vector<double>{1e-300, 0.0, 1e-300, 0.0, 0.0}})
    check_ranges(feature_vector(x));
  const auto one = feature_vector(std::vector<double>{5.0});
  for (double v : one) CHECK(v == 0.0);
}

TEST_CASE("bounded features stay in range over random series") {
  Rng rng(7);
  for (int i = 0; i < 10000; ++i) {
    const std::size_t n = 2 + rng.below(200);
    std::vector<double> x(n);
    const double scale = std::exp(4.0 * rng.normal());
    switch (rng.below(5)) {
      case 0: x = noise(n, rng); break;
      case 1: x = ar1(n, 0.99 * (2 * rng.uniform() - 1), rng); break;
      case 2: {
        double s = 0.0;
        for (auto& v : x) v = s += rng.normal();
        break;
      }
      case 3: {
        const double period = 2.0 + 30.0 * rng.uniform();
        for (std::size_t t = 0; t < n; ++t) x[t] = std::sin(2 * std::numbers::pi * static_cast<double>(t) / period);
        break;
      }
      default:
        for (auto& v : x) v = static_cast<double>(rng.below(3));
    }
    for (auto& v : x) v *= scale;
    check_ranges(feature_vector(x));
  }
}

TEST_CASE("extract ignores padding and is pure") {
  Rng rng(8);
  std::vector<std::vector<double>> rows{noise(40, rng), ar1(70, 0.5, rng), ramp(25)};
  const Tensor a = extract(batch_of(rows, 70));
  const Tensor b = extract(batch_of(rows, 200));
  CHECK(a.shape() == Shape{3, kNumFeatures});
  CHECK(a.values() == b.values());
  CHECK(extract(batch_of(rows, 70)).values() == a.values());
  CHECK_FALSE(a.requires_grad());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const auto f = feature_vector(rows[r]);
    for (std::size_t k = 0; k < kNumFeatures; ++k) CHECK(a[r * kNumFeatures + k] == f[k]);
  }
}

TEST_CASE("feature scaler standardizes the training split") {
  Tensor raw({4, 2}, {1, 5, 3, 5, 5, 5, 7, 5});
  const auto s = FeatureScaler::fit(raw);
  CHECK_THAT(s.mean[0], WithinAbs(4.0, 1e-15));
  CHECK_THAT(s.stddev[0], WithinAbs(std::sqrt(5.0), 1e-15));
  CHECK(s.stddev[1] == 1.0);
  const Tensor z = s.apply(raw);
  double m = 0.0, v = 0.0;
  for (std::size_t b = 0; b < 4; ++b) m += z[b * 2];
  for (std::size_t b = 0; b < 4; ++b) v += z[b * 2] * z[b * 2];
  CHECK_THAT(m, WithinAbs(0.0, 1e-12));
  CHECK_THAT(v / 4, WithinAbs(1.0, 1e-12));
  CHECK(z[1] == 0.0);
  CHECK_THROWS_AS(s.apply(Tensor({1, 3}, {1, 2, 3})), DimensionError);
}
