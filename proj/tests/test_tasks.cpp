#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <numbers>
#include <random>

#include "tstok/tasks.hpp"

using namespace tstok;

namespace {

VqVaeConfig tiny_config() {
  VqVaeConfig c;
  c.codebook_size = 8;
  c.code_dim = 4;
  c.compression = 4;
  c.num_residual_layers = 1;
  c.residual_hidden = 3;
  c.block_hidden = 6;
  c.batch_size = 16;
  c.iterations = 10;
  c.seed = 5;
  return c;
}

Tensor random_tensor(Shape shape, std::mt19937_64& rng) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> d;
  for (auto& v : t.data()) v = d(rng);
  return t;
}

}  // namespace

TEST_CASE("top_fraction picks the largest scores with ties to the lower index") {
  CHECK(top_fraction({0.1, 5.0, 0.2, 4.0}, 0.5) == Labels{0, 1, 0, 1});
  CHECK(top_fraction({1.0, 1.0, 1.0, 1.0}, 0.5) == Labels{1, 1, 0, 0});
  CHECK(top_fraction({0.3, 0.2}, 0.0) == Labels{0, 0});
  CHECK_THROWS_AS(top_fraction({0.3}, 1.0), std::invalid_argument);
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 1 + rng() % 200;
    const double ratio = std::uniform_real_distribution<double>(0.0, 0.999)(rng);
    std::vector<double> s(n);
    for (auto& v : s) v = static_cast<double>(rng() % 7);
    const Labels f = top_fraction(s, ratio);
    std::size_t count = 0;
    for (auto v : f) count += v;
    CHECK(count == static_cast<std::size_t>(std::llround(ratio * static_cast<double>(n))));
    double min_flag = 1e300, max_unflag = -1e300;
    for (std::size_t i = 0; i < n; ++i) (f[i] ? min_flag : max_unflag) = f[i] ? std::min(min_flag, s[i]) : std::max(max_unflag, s[i]);
    if (count > 0 && count < n) CHECK(min_flag >= max_unflag);
  }
}

TEST_CASE("detect_anomalies flag count and score layout") {
  VqVae m(tiny_config());
  std::mt19937_64 rng(2);
  const Tensor series = random_tensor({3, 64}, rng);
  const auto r = detect_anomalies(m, series, 0.1);
  CHECK(r.scores.size() == 64);
  std::size_t count = 0;
  for (auto f : r.flags) count += f;
  CHECK(count == 6);
  CHECK(detect_anomalies(m, series, 0.0).flags == Labels(64, 0));
  CHECK_THROWS_AS(detect_anomalies(m, series, 1.0), std::invalid_argument);

  // Scores are the sensor-averaged squared reconstruction error.
  const Tensor x = revin_normalize(UnivariateBatch{series, {}}).first.series;
  const Tensor rec = m.reconstruct(x);
  for (std::size_t t = 0; t < 64; t += 9) {
    double s = 0.0;
    for (std::size_t i = 0; i < 3; ++i) s += (rec.at(i, t) - x.at(i, t)) * (rec.at(i, t) - x.at(i, t));
    CHECK(r.scores[t] == doctest::Approx(s / 3.0).epsilon(1e-12));
  }

  AnomalyOptions pw;
  pw.ratio = 0.25;
  pw.mode = ThresholdMode::PerWindow;
  pw.window = 16;
  const auto w = detect_anomalies(m, series, pw);
  for (std::size_t b = 0; b < 64; b += 16) {
    std::size_t c = 0;
    for (std::size_t t = b; t < b + 16; ++t) c += w.flags[t];
    CHECK(c == 4);
  }
}

TEST_CASE("impute keeps observed entries bit-exactly") {
  VqVae m(tiny_config());
  std::mt19937_64 rng(3);
  UnivariateBatch b{random_tensor({4, 32}, rng), {}};
  const auto none = impute(m, b, MaskSpec::all_observed(4, 32));
  CHECK(none.filled == b.series);
  const MaskSpec mask = sample_mask(4, 32, 0.25, 7);
  RevInState norm{{1.0, -2.0, 0.5, 0.0}, {2.0, 1.0, 3.0, 0.5}};
  const auto r = impute(m, b, mask, norm);
  CHECK(r.recon.shape() == b.series.shape());
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t t = 0; t < 32; ++t) {
      if (mask.observed(i, t)) CHECK(r.filled.at(i, t) == b.series.at(i, t));
      else CHECK(r.filled.at(i, t) == r.recon.at(i, t));
    }
  CHECK_THROWS_AS(impute(m, b, MaskSpec::all_observed(3, 32)), std::invalid_argument);
}

TEST_CASE("mean fill and imputation scores") {
  UnivariateBatch b{Tensor({1, 4}, std::vector<double>{1.0, 2.0, 3.0, 10.0}), {}};
  MaskSpec mask = MaskSpec::all_observed(1, 4);
  mask.observed_flags[3] = 0;
  const Tensor filled = mean_fill(b, mask);
  CHECK(filled.at(0, 3) == doctest::Approx(2.0));
  const auto s = score_imputation(b.series, filled, mask);
  CHECK(s.mse_masked == doctest::Approx(64.0));
  CHECK(s.mae_masked == doctest::Approx(8.0));
  CHECK(s.mse_all == doctest::Approx(16.0));
}

TEST_CASE("trained imputer beats mean fill on sinusoids") {
  VqVaeConfig c;
  c.codebook_size = 64;
  c.code_dim = 16;
  c.block_hidden = 32;
  c.residual_hidden = 16;
  c.batch_size = 32;
  c.iterations = 1200;
  c.instance_norm = false;
  c.seed = 3;
  auto rows = [](std::size_t n, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> period(10.0, 30.0), phase(0.0, 6.28);
    Tensor x({n, 64});
    for (std::size_t i = 0; i < n; ++i) {
      const double p = period(rng), ph = phase(rng);
      for (std::size_t t = 0; t < 64; ++t) x.at(i, t) = std::sin(2.0 * std::numbers::pi * static_cast<double>(t) / p + ph);
    }
    return x;
  };
  VqVae m(c);
  const std::vector<double> ratios{0.125, 0.25, 0.375, 0.5};
  train_imputing(m, rows(256, 1), ratios);
  UnivariateBatch test{rows(64, 2), {}};
  const MaskSpec mask = sample_mask(64, 64, 0.25, 11);
  const auto r = impute(m, test, mask);
  const double model_mse = score_imputation(test.series, r.filled, mask).mse_masked;
  const double base_mse = score_imputation(test.series, mean_fill(test, mask), mask).mse_masked;
  MESSAGE("imputation masked MSE " << model_mse << " vs mean fill " << base_mse);
  CHECK(model_mse < base_mse);
}
