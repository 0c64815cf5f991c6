#include <doctest.h>

#include <cmath>
#include <vector>

#include "prefseg/error.hpp"
#include "prefseg/metrics.hpp"
#include "prefseg/rng.hpp"
#include "support/oracles.hpp"

using namespace prefseg;
using metrics::ChairInput;

namespace {
constexpr double kOracleTol = 1e-12;
}

TEST_CASE("chair worked example: one of two responses hallucinates one of four mentions") {
  // response 1 mentions {a,b,c} against {a,b,c,d}; response 2 mentions {x} against {y}
  std::vector<ChairInput> rs{{{1, 2, 3}, {1, 2, 3, 4}}, {{9}, {8}}};
  const auto r = metrics::chair(rs);
  CHECK(r.c_s == 0.5);
  REQUIRE(r.c_i.has_value());
  CHECK(*r.c_i == 0.25);
}

TEST_CASE("chair extremes and the undefined instance rate") {
  std::vector<ChairInput> clean{{{1}, {1, 2}}, {{2}, {2}}};
  CHECK(metrics::chair(clean).c_s == 0.0);
  CHECK(*metrics::chair(clean).c_i == 0.0);
  std::vector<ChairInput> all_bad{{{5}, {1}}, {{6, 7}, {1}}};
  CHECK(metrics::chair(all_bad).c_s == 1.0);
  CHECK(*metrics::chair(all_bad).c_i == 1.0);
  std::vector<ChairInput> silent{{{}, {1}}};
  CHECK_FALSE(metrics::chair(silent).c_i.has_value());
  CHECK_THROWS(metrics::chair(std::vector<ChairInput>{}));
}

TEST_CASE("chair is monotone when a hallucinated object is added") {
  Rng rng(5);
  for (int t = 0; t < 100; ++t) {
    std::vector<ChairInput> rs(static_cast<std::size_t>(rng.uniform_int(1, 5)));
    for (auto& r : rs) {
      for (int o = 0; o < 6; ++o) {
        if (rng.uniform() < 0.4) r.mentioned.insert(o);
        if (rng.uniform() < 0.5) r.ground_truth.insert(o);
      }
    }
    const auto before = metrics::chair(rs);
    auto& target = rs[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(rs.size()) - 1))];
    target.mentioned.insert(100);
    const auto after = metrics::chair(rs);
    CHECK(after.c_s >= before.c_s);
    CHECK(*after.c_i >= before.c_i.value_or(0.0));
  }
}

TEST_CASE("pearson affine relations and the four-point oracle") {
  std::vector<double> x{1, 2, 3, 4, 5};
  std::vector<double> up, down;
  for (double v : x) {
    up.push_back(2 * v + 3);
    down.push_back(-v);
  }
  CHECK(metrics::pearson(x, up) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(metrics::pearson(x, down) == doctest::Approx(-1.0).epsilon(1e-15));
  std::vector<double> a{1, 2, 3, 4}, b{1, 3, 2, 4};
  // Centred sums: sxy = 4, sxx = syy = 5.
  CHECK(std::abs(metrics::pearson(a, b) - 0.8) < kOracleTol);
  CHECK_THROWS_AS(metrics::pearson(a, std::vector<double>{2, 2, 2, 2}), NumericError);
  CHECK_THROWS_AS(metrics::pearson(std::vector<double>{1}, std::vector<double>{1}), ShapeError);
}

TEST_CASE("chair and pearson match brute-force oracles on random instances") {
  Rng rng(21);
  for (int t = 0; t < 150; ++t) {
    std::vector<ChairInput> rs;
    std::vector<std::pair<std::set<int>, std::set<int>>> plain;
    const int n = rng.uniform_int(1, 8);
    for (int i = 0; i < n; ++i) {
      ChairInput r;
      for (int o = 0; o < 10; ++o) {
        if (rng.uniform() < 0.3) r.mentioned.insert(o);
        if (rng.uniform() < 0.5) r.ground_truth.insert(o);
      }
      plain.emplace_back(r.mentioned, r.ground_truth);
      rs.push_back(r);
    }
    const auto got = metrics::chair(rs);
    const auto want = oracle::chair(plain);
    CHECK(std::abs(got.c_s - want.c_s) <= kOracleTol);
    CHECK(got.c_i.has_value() == want.has_c_i);
    if (want.has_c_i) CHECK(std::abs(*got.c_i - want.c_i) <= kOracleTol);

    std::vector<double> x, y;
    const int m = rng.uniform_int(2, 30);
    for (int i = 0; i < m; ++i) {
      x.push_back(rng.normal());
      y.push_back(0.5 * x.back() + rng.normal());
    }
    CHECK(std::abs(metrics::pearson(x, y) - oracle::pearson(x, y)) <= kOracleTol);
    std::vector<double> shifted;
    for (double v : x) shifted.push_back(3.5 * v - 2.0);
    CHECK(std::abs(metrics::pearson(shifted, y) - metrics::pearson(x, y)) <= 1e-12);
  }
}

TEST_CASE("aggregate iou: perfect plus disjoint pair") {
  Mask g1(4, 4), g2(4, 4), p2(4, 4);
  g1.fill_rect(0, 0, 2, 2);
  g2.fill_rect(0, 0, 2, 2);
  p2.fill_rect(2, 2, 2, 2);
  std::vector<metrics::MaskPair> pairs{{g1, g1}, {p2, g2}};
  const auto agg = metrics::aggregate_iou(pairs);
  CHECK(agg.giou == 0.5);
  // Intersections 4 + 0, unions 4 + 8.
  CHECK(agg.ciou == doctest::Approx(4.0 / 12.0).epsilon(1e-15));
  std::vector<metrics::MaskPair> one{{p2, g2}};
  CHECK(metrics::aggregate_iou(one).giou == metrics::aggregate_iou(one).ciou);
  std::vector<metrics::MaskPair> bad{{Mask(4, 4), Mask(3, 4)}};
  CHECK_THROWS_AS(metrics::aggregate_iou(bad), ShapeError);
}

TEST_CASE("aggregate iou matches the oracle and is stable under duplication") {
  Rng rng(8);
  for (int t = 0; t < 120; ++t) {
    std::vector<metrics::MaskPair> pairs;
    std::vector<std::pair<Mask, Mask>> plain;
    const int h = rng.uniform_int(1, 9), w = rng.uniform_int(1, 9);
    for (int i = rng.uniform_int(1, 6); i > 0; --i) {
      Mask p = oracle::random_mask(rng, h, w, 0.4), g = oracle::random_mask(rng, h, w, 0.4);
      pairs.push_back({p, g});
      plain.emplace_back(p, g);
    }
    const auto got = metrics::aggregate_iou(pairs);
    const auto want = oracle::aggregate_iou(plain);
    CHECK(std::abs(got.giou - want.first) <= kOracleTol);
    CHECK(std::abs(got.ciou - want.second) <= kOracleTol);
    std::vector<metrics::MaskPair> copies(5, pairs.front());
    const auto dup = metrics::aggregate_iou(copies);
    const double single = iou(pairs.front().predicted, pairs.front().ground_truth);
    CHECK(dup.giou == doctest::Approx(single).epsilon(1e-15));
    CHECK(dup.ciou == doctest::Approx(single).epsilon(1e-15));
  }
}

TEST_CASE("metrics report round-trips through json and validates ranges") {
  metrics::MetricsReport r;
  r.c_s = 0.1;
  r.giou = 0.7;
  r.ciou = 0.6;
  r.responses = 10;
  const auto back = metrics::report_from_json(metrics::to_json(r));
  CHECK(back.giou == r.giou);
  CHECK_FALSE(back.c_i.has_value());
  CHECK(metrics::to_json(r)["c_i"].is_null());
  r.giou = 1.5;
  CHECK_THROWS_AS(metrics::validate(r), InvariantError);
}
