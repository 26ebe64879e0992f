#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "tstok/data.hpp"

using namespace tstok;

namespace {

TimeSeriesDataset make_dataset(std::size_t e, std::size_t s, std::size_t t, std::uint64_t seed) {
  TimeSeriesDataset ds;
  ds.values = Tensor({e, s, t});
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d(3.0, 2.0);
  for (auto& v : ds.values.data()) v = d(rng);
  for (std::size_t i = 0; i < s; ++i) ds.sensor_names.push_back("s" + std::to_string(i));
  for (std::size_t i = 0; i < e; ++i) ds.example_ids.push_back(std::to_string(i));
  return ds;
}

}  // namespace

TEST_CASE("parse_csv reads header and rows") {
  std::istringstream in("a,b\n1,2\n3,4\n5.5,-6e-1\n");
  const auto ds = parse_csv(in);
  CHECK(ds.values.shape() == Shape{1, 2, 3});
  CHECK(ds.sensor_names == std::vector<std::string>{"a", "b"});
  CHECK(ds.values.at(0, 0, 2) == 5.5);
  CHECK(ds.values.at(0, 1, 2) == -0.6);
  CHECK(ds.values.at(0, 1, 0) == 2.0);
}

TEST_CASE("parse_csv reports non-numeric cells with line and column") {
  std::istringstream in("a,b\n1.0,x\n");
  try {
    parse_csv(in);
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(e.line() == 2);
    CHECK(e.column() == 2);
  }
}

TEST_CASE("parse_csv rejects malformed rows, empty files and NaN") {
  std::istringstream short_row("a,b\n1,2\n3\n");
  try {
    parse_csv(short_row);
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(e.line() == 3);
  }
  std::istringstream empty("");
  CHECK_THROWS_AS(parse_csv(empty), ParseError);
  std::istringstream header_only("a,b\n");
  CHECK_THROWS_AS(parse_csv(header_only), ParseError);
  std::istringstream nan_row("a\nnan\n");
  CHECK_THROWS_AS(parse_csv(nan_row), ParseError);
}

TEST_CASE("load_csv of a 96 x 7 file") {
  const auto path = std::filesystem::temp_directory_path() / "tstok_load_csv_test.csv";
  {
    std::ofstream out(path);
    out << "a,b,c,d,e,f,g\n";
    for (int t = 0; t < 96; ++t) {
      for (int s = 0; s < 7; ++s) out << (s ? "," : "") << t * 10 + s;
      out << "\n";
    }
  }
  const auto ds = load_csv(path);
  CHECK(ds.values.shape() == Shape{1, 7, 96});
  CHECK(ds.values.at(0, 3, 95) == 953.0);
  std::filesystem::remove(path);
  CHECK_THROWS(load_csv(path));
}

TEST_CASE("make_windows takes stride-spaced windows inside each split") {
  TimeSeriesDataset ds = make_dataset(1, 2, 30, 1);
  for (std::size_t t = 0; t < 30; ++t) ds.values.at(0, 0, t) = static_cast<double>(t);
  SplitSpec spec{{0, 10}, {10, 20}, {20, 30}, 4, 2};
  const auto w = make_windows(ds, spec);
  CHECK(w.train.values.shape() == Shape{4, 2, 4});
  for (std::size_t i = 0; i < 4; ++i) CHECK(w.train.values.at(i, 0, 0) == static_cast<double>(2 * i));
  CHECK(w.val.values.at(0, 0, 0) == 10.0);
  CHECK(w.test.values.at(3, 0, 3) == 29.0);

  spec.stride = 4;
  const auto nonoverlap = make_windows(ds, spec);
  CHECK(nonoverlap.train.examples() == 2);
  CHECK(nonoverlap.train.values.at(1, 0, 0) == 4.0);

  spec.window_length = 12;
  CHECK_THROWS_AS(make_windows(ds, spec), std::invalid_argument);

  SplitSpec overlapping{{0, 15}, {10, 20}, {20, 30}, 4, 2};
  CHECK_THROWS_AS(overlapping.validate(), std::invalid_argument);
}

TEST_CASE("window count formula matches explicit enumeration") {
  for (std::size_t range = 1; range <= 40; ++range)
    for (std::size_t window = 1; window <= range; ++window)
      for (std::size_t stride = 1; stride <= 7; ++stride) {
        std::size_t enumerated = 0;
        for (std::size_t start = 0; start + window <= range; start += stride) ++enumerated;
        REQUIRE(window_count(range, window, stride) == enumerated);
      }
}

TEST_CASE("flatten is example-major, sensor-minor and round-trips") {
  const auto ds = make_dataset(2, 3, 5, 2);
  const auto b = flatten_sensors(ds);
  CHECK(b.rows() == 6);
  for (std::size_t e = 0; e < 2; ++e)
    for (std::size_t s = 0; s < 3; ++s) {
      CHECK(b.origin[e * 3 + s] == std::pair{e, s});
      for (std::size_t t = 0; t < 5; ++t) CHECK(b.series.at(e * 3 + s, t) == ds.values.at(e, s, t));
    }
  CHECK(unflatten_sensors(b, 2, 3).values == ds.values);

  const auto single = make_dataset(1, 1, 7, 3);
  CHECK(flatten_sensors(single).series.values() == single.values.values());
}

TEST_CASE("flatten/unflatten bijection over many shapes") {
  std::uint64_t seed = 10;
  for (std::size_t e = 1; e <= 4; ++e)
    for (std::size_t s = 1; s <= 4; ++s)
      for (std::size_t t : {1u, 2u, 9u}) {
        const auto ds = make_dataset(e, s, t, seed++);
        const auto b = flatten_sensors(ds);
        REQUIRE(b.rows() == e * s);
        REQUIRE(unflatten_sensors(b, e, s).values == ds.values);
      }
}

TEST_CASE("instance normalization edge cases") {
  UnivariateBatch b{Tensor({2, 4}, std::vector<double>{1, 1, 1, 1, 0, 2, 0, 2}), {}};
  auto [n, st] = revin_normalize(b);
  for (double v : n.series.row(0)) CHECK(v == 0.0);
  CHECK(st.mean[0] == 1.0);
  CHECK(st.std[0] == kStdFloor);
  CHECK(st.mean[1] == 1.0);
  CHECK(st.std[1] == 1.0);
  CHECK(n.series.at(1, 0) == -1.0);
  CHECK(n.series.at(1, 1) == 1.0);

  UnivariateBatch one_step{Tensor({1, 1}, 3.0), {}};
  CHECK_THROWS_AS(revin_normalize(one_step), std::invalid_argument);
}

TEST_CASE("normalized rows have zero mean and unit std, and denormalize inverts") {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> d(0.0, 1.0);
  std::uniform_real_distribution<double> scale(0.01, 1000.0);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor x({3, 37});
    for (std::size_t i = 0; i < 3; ++i) {
      const double a = scale(rng), off = scale(rng) - 500.0;
      for (auto& v : x.row(i)) v = a * d(rng) + off;
    }
    UnivariateBatch b{x, {}};
    auto [n, st] = revin_normalize(b);
    for (std::size_t i = 0; i < 3; ++i) {
      double mu = 0.0, var = 0.0;
      for (double v : n.series.row(i)) mu += v;
      mu /= 37.0;
      for (double v : n.series.row(i)) var += (v - mu) * (v - mu);
      CHECK(std::abs(mu) < 1e-9);
      CHECK(std::abs(std::sqrt(var / 37.0) - 1.0) < 1e-6);
    }
    const auto back = revin_denormalize(n, st);
    for (std::size_t j = 0; j < x.size(); ++j) {
      REQUIRE(std::abs(back.series[j] - x[j]) <= 1e-6 * std::max(1.0, std::abs(x[j])));
    }
  }
}

TEST_CASE("denormalize arithmetic and shape checks") {
  UnivariateBatch z{Tensor({1, 3}, 0.0), {}};
  const auto five = revin_denormalize(z, RevInState{{5.0}, {2.0}});
  for (double v : five.series.data()) CHECK(v == 5.0);
  UnivariateBatch x{Tensor({1, 3}, std::vector<double>{1, 2, 3}), {}};
  CHECK(revin_denormalize(x, RevInState{{0.0}, {1.0}}).series == x.series);
  CHECK_THROWS_AS(revin_denormalize(x, RevInState{{0.0, 1.0}, {1.0, 1.0}}), std::invalid_argument);
}

TEST_CASE("apply_mask fills missing positions only") {
  UnivariateBatch b{Tensor({1, 3}, std::vector<double>{3, 4, 5}), {}};
  MaskSpec m{1, 3, 1.0 / 3.0, {1, 0, 1}};
  const auto out = apply_mask(b, m, 0.0);
  CHECK(out.series.values() == std::vector<double>{3, 0, 5});
  CHECK(apply_mask(b, MaskSpec::all_observed(1, 3), 0.0).series == b.series);
  CHECK_THROWS_AS(apply_mask(b, MaskSpec::all_observed(2, 3), 0.0), std::invalid_argument);
}

TEST_CASE("sample_mask draws exact counts deterministically") {
  const auto m = sample_mask(5, 96, 0.25, 42);
  for (std::size_t i = 0; i < 5; ++i) CHECK(m.missing_in_row(i) == 24);
  const auto half = sample_mask(3, 96, 0.5, 1);
  for (std::size_t i = 0; i < 3; ++i) CHECK(half.missing_in_row(i) == 48);
  CHECK(sample_mask(5, 96, 0.25, 42).observed_flags == m.observed_flags);
  CHECK(sample_mask(5, 96, 0.25, 43).observed_flags != m.observed_flags);
  CHECK(sample_mask(2, 10, 0.0, 1).observed_flags == MaskSpec::all_observed(2, 10).observed_flags);
  CHECK_THROWS_AS(sample_mask(1, 10, 1.0, 1), std::invalid_argument);
  CHECK_THROWS_AS(sample_mask(1, 10, -0.1, 1), std::invalid_argument);
}

TEST_CASE("sample_mask missing fraction stays within 1/T of the ratio") {
  for (double ratio : {0.125, 0.25, 0.375, 0.5, 0.33, 0.9}) {
    for (std::size_t steps : {7u, 16u, 96u, 101u}) {
      const auto m = sample_mask(4, steps, ratio, 99);
      for (std::size_t i = 0; i < 4; ++i) {
        const double frac = static_cast<double>(m.missing_in_row(i)) / static_cast<double>(steps);
        CHECK(std::abs(frac - ratio) <= 1.0 / static_cast<double>(steps));
      }
    }
  }
}

TEST_CASE("global normalizer uses training statistics for every split") {
  auto ds = make_dataset(4, 2, 50, 5);
  const auto g = GlobalNormalizer::fit(ds);
  const auto n = g.apply(ds);
  for (std::size_t s = 0; s < 2; ++s) {
    double mu = 0.0;
    for (std::size_t e = 0; e < 4; ++e)
      for (std::size_t t = 0; t < 50; ++t) mu += n.values.at(e, s, t);
    CHECK(std::abs(mu / 200.0) < 1e-12);
  }
  const auto back = g.invert(n);
  for (std::size_t i = 0; i < ds.values.size(); ++i) CHECK(back.values[i] == doctest::Approx(ds.values[i]));
  const auto rows = g.row_state(flatten_sensors(ds));
  CHECK(rows.mean.size() == 8);
  CHECK(rows.mean[3] == g.mean[1]);
}

TEST_CASE("dataset validation") {
  auto ds = make_dataset(1, 2, 3, 1);
  CHECK_NOTHROW(ds.validate());
  ds.values[0] = std::nan("");
  CHECK_THROWS_AS(ds.validate(), std::invalid_argument);
  auto bad_names = make_dataset(1, 2, 3, 1);
  bad_names.sensor_names.pop_back();
  CHECK_THROWS_AS(bad_names.validate(), std::invalid_argument);
}
