#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <random>
#include <sstream>

#include "tstok/metrics.hpp"

using namespace tstok;

TEST_CASE("mse and mae hand arithmetic") {
  const std::vector<double> p{0, 0}, t{1, 3};
  CHECK(mse(p, t) == doctest::Approx(5.0));
  CHECK(mae(p, t) == doctest::Approx(2.0));
  CHECK(mse(t, t) == 0.0);
  const std::vector<std::uint8_t> sel{0, 1};
  CHECK(mse(p, t, sel) == doctest::Approx(9.0));
  CHECK(mae(p, t, sel) == doctest::Approx(3.0));
  CHECK_THROWS(mse(p, std::vector<double>{1.0}));
}

TEST_CASE("point_adjust segment semantics") {
  CHECK(point_adjust({0, 0, 1, 0}, {0, 1, 1, 0}) == Labels{0, 1, 1, 0});
  CHECK(point_adjust({1, 0, 0, 0}, {0, 1, 1, 0}) == Labels{1, 0, 0, 0});
  CHECK(point_adjust({0, 1, 0, 0, 0, 0}, {1, 1, 0, 1, 1, 0}) == Labels{1, 1, 0, 0, 0, 0});
  CHECK_THROWS(point_adjust({0}, {0, 1}));
}

TEST_CASE("precision recall f1") {
  const Labels truth{0, 1, 1, 0}, pred{0, 0, 1, 0};
  auto raw = precision_recall_f1(pred, truth, false);
  CHECK(raw.precision == doctest::Approx(1.0));
  CHECK(raw.recall == doctest::Approx(0.5));
  CHECK(raw.f1 == doctest::Approx(2.0 / 3.0));
  auto adj = precision_recall_f1(pred, truth, true);
  CHECK(adj.f1 == doctest::Approx(1.0));
  auto none = precision_recall_f1({0, 0, 0, 0}, truth, false);
  CHECK(none.recall == 0.0);
  CHECK(none.f1 == 0.0);
  CHECK(none.precision == 0.0);
}

TEST_CASE("random label properties") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + rng() % 30;
    Labels p(n), t(n);
    for (std::size_t i = 0; i < n; ++i) {
      p[i] = rng() % 4 == 0;
      t[i] = rng() % 3 == 0;
    }
    const auto a = point_adjust(p, t);
    CHECK(point_adjust(a, t) == a);
    for (std::size_t i = 0; i < n; ++i) {
      if (!t[i]) CHECK(a[i] == p[i]);
      CHECK(a[i] >= p[i]);
    }
    CHECK(precision_recall_f1(p, t, true).f1 >= precision_recall_f1(p, t, false).f1 - 1e-15);
    CHECK(precision_recall_f1(p, t, true).recall >= precision_recall_f1(p, t, false).recall);
  }
}

TEST_CASE("avg_wins counting and ties") {
  ResultTable t;
  t.add({"A", "s1", "mse", 1.0, true});
  t.add({"B", "s1", "mse", 2.0, true});
  t.add({"A", "s2", "f1", 0.5, false});
  t.add({"B", "s2", "f1", 0.9, false});
  auto w = avg_wins(t);
  CHECK(w["A"] == doctest::Approx(0.5));
  CHECK(w["B"] == doctest::Approx(0.5));

  ResultTable tied;
  tied.add({"A", "s1", "mse", 1.0, true});
  tied.add({"B", "s1", "mse", 1.0, true});
  tied.add({"A", "s2", "mse", 3.0, true});
  tied.add({"B", "s2", "mse", 3.0, true});
  CHECK(avg_wins(tied, true)["A"] == 1.0);
  CHECK(avg_wins(tied, true)["B"] == 1.0);
  CHECK(avg_wins(tied, false)["A"] == 0.0);
  CHECK_THROWS(avg_wins(ResultTable{}));
  CHECK_THROWS(tied.add({"A", "s1", "mse", 0.0, true}));
}

TEST_CASE("result table csv round trip and render") {
  ResultTable t;
  t.add({"A", "96", "mse", 0.123456789012345, true});
  t.add({"B", "96", "mse", 0.2, true});
  std::ostringstream out;
  t.write_csv(out);
  CHECK(out.str().rfind("method,setting,metric,value,direction\n", 0) == 0);
  std::istringstream in(out.str());
  auto back = ResultTable::read_csv(in);
  REQUIRE(back.rows().size() == 2);
  CHECK(back.rows()[0].value == t.rows()[0].value);
  CHECK(t.render().find("AvgWins") != std::string::npos);
}

TEST_CASE("permutation test exhaustive and monte carlo") {
  const std::vector<double> a{1, 1, 1}, b{2, 2, 2};
  CHECK(permutation_test(a, b) == doctest::Approx(1.0 / 8.0));
  CHECK(permutation_test(a, a) == 1.0);
  CHECK_THROWS(permutation_test(std::vector<double>{}, std::vector<double>{}));
  CHECK_THROWS(permutation_test(a, std::vector<double>{1.0}));

  std::mt19937_64 rng(11);
  std::normal_distribution<double> nd;
  std::vector<double> x(10), y(10);
  for (std::size_t i = 0; i < 10; ++i) {
    x[i] = nd(rng);
    y[i] = nd(rng) + 0.5;
  }
  const double exact = permutation_test(x, y);
  PermutationTestOptions mc;
  mc.exhaustive_limit = 0;
  mc.seed = 5;
  CHECK(std::abs(permutation_test(x, y, mc) - exact) <= 0.02);
  const double rev = permutation_test(y, x);
  CHECK(exact + rev >= 1.0);
  // the identity relabeling ties with itself under the inclusive convention
  CHECK(exact + rev == doctest::Approx(1.0 + 1.0 / 1024.0));

  PermutationTestOptions up;
  up.paired = false;
  CHECK(permutation_test(std::vector<double>{1, 1}, std::vector<double>{2, 2}, up) ==
        doctest::Approx(1.0 / 6.0));
}
