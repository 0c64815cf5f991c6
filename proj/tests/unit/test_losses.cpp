#include <doctest.h>

#include <cmath>
#include <vector>

#include "prefseg/error.hpp"
#include "prefseg/losses.hpp"
#include "prefseg/rng.hpp"

using namespace prefseg;
using namespace prefseg::losses;
using Eigen::VectorXd;

namespace {

constexpr double kLn2Tol = 1e-9;
constexpr double kFdStep = 1e-5;
constexpr double kFdTol = 1e-4;

VectorXd random_vec(Rng& rng, int n) {
  VectorXd v(n);
  for (int i = 0; i < n; ++i) v[i] = rng.normal();
  return v;
}

std::vector<double> random_logps(Rng& rng, int n) {
  std::vector<double> v;
  for (int i = 0; i < n; ++i) v.push_back(-0.05 - 2.0 * rng.uniform());
  return v;
}

Embedding at_angle(double cosine) {
  Embedding e = Embedding::Zero(8);
  e[0] = cosine;
  e[1] = std::sqrt(1.0 - cosine * cosine);
  return e;
}

}  // namespace

TEST_CASE("weighted log-likelihood examples") {
  CHECK(weighted_log_likelihood(std::vector<double>{-1, -1}, {}, 5.0) == -1.0);
  CHECK(weighted_log_likelihood(std::vector<double>{-1, -2}, {1}, 5.0) == -5.5);
  const std::vector<double> lp{-0.3, -1.2, -0.7};
  CHECK(weighted_log_likelihood(lp, {0, 1, 2}, 1.0) ==
        doctest::Approx((-0.3 - 1.2 - 0.7) / 3.0).epsilon(1e-15));
  CHECK(weighted_log_likelihood(lp, {1, 1}, 5.0) == weighted_log_likelihood(lp, {1}, 5.0));
  CHECK_THROWS_AS(weighted_log_likelihood(lp, {3}, 5.0), IndexError);
}

TEST_CASE("text dpo loss is ln 2 when policy equals reference") {
  Rng rng(1);
  PreferenceHyper h;
  for (int t = 0; t < 20; ++t) {
    const auto yc = random_logps(rng, 6), y = random_logps(rng, 6);
    const auto v = text_dpo_loss(yc, y, yc, y, {1, 4}, {2}, h);
    CHECK(std::abs(v.value - std::log(2.0)) <= kLn2Tol);
  }
  const std::vector<double> a{-1.0}, b{-1.0, -2.0};
  CHECK_THROWS_AS(text_dpo_loss(a, a, b, a, {}, {}, h), ShapeError);
}

TEST_CASE("text dpo loss is monotone in the two weighted likelihoods") {
  PreferenceHyper h;
  const std::vector<double> ref{-1.0, -1.0}, y{-1.0, -1.0};
  double prev = 1e9;
  for (double m = -1.0; m <= 0.0; m += 0.25) {
    const std::vector<double> yc{m - 1.0, -1.0};
    const double v = text_dpo_loss(yc, y, ref, ref, {}, {0}, h).value;
    CHECK(v < prev);
    prev = v;
  }
  // Inner argument m gives -log sigmoid(m).
  const std::vector<double> yc{-0.5, -1.0};
  const double margin = h.beta_t * (weighted_log_likelihood(yc, {0}, 5.0) -
                                    weighted_log_likelihood(ref, {0}, 5.0));
  CHECK(text_dpo_loss(yc, y, ref, ref, {}, {0}, h).value ==
        doctest::Approx(neg_log_sigmoid(margin)).epsilon(1e-14));
  const std::vector<double> worse_y{-0.2, -1.0};
  CHECK(text_dpo_loss(ref, worse_y, ref, ref, {0}, {}, h).value > std::log(2.0));
}

TEST_CASE("seg preference loss: zero margin, gating and scale invariance") {
  Rng rng(2);
  for (int t = 0; t < 20; ++t) {
    const Embedding best = random_vec(rng, 8), mid = random_vec(rng, 8),
                    worst = random_vec(rng, 8), pol = random_vec(rng, 8);
    const auto eq = seg_preference_loss(mid, best, mid, worst, true, 10.0);
    CHECK(std::abs(eq.value - std::log(2.0)) <= kLn2Tol);
    const auto off = seg_preference_loss(pol, best, mid, worst, false, 10.0);
    CHECK(off.value == 0.0);
    CHECK(off.gradients[0].isZero(0.0));
    const double a = seg_preference_loss(pol, best, mid, worst, true, 10.0).value;
    const double b = seg_preference_loss(3.7 * pol, best, mid, worst, true, 10.0).value;
    CHECK(a == doctest::Approx(b).epsilon(1e-12));
  }
  CHECK_THROWS_AS(seg_preference_loss(Embedding::Zero(8), at_angle(0.5), at_angle(0.2),
                                      at_angle(0.1), true, 10.0),
                  NumericError);
}

TEST_CASE("improvement loss worked examples") {
  const Embedding gt = at_angle(1.0);
  std::vector<Embedding> originals{at_angle(0.5)};
  const auto lti = text_improvement_loss(1.0, at_angle(0.7), gt, originals);
  CHECK(lti.value == doctest::Approx(neg_log_sigmoid(2.0)).epsilon(1e-12));
  std::vector<Embedding> same{at_angle(0.3), at_angle(0.3)};
  CHECK(std::abs(text_improvement_loss(0.4, at_angle(0.3), gt, same).value - std::log(2.0)) <=
        kLn2Tol);

  const std::vector<double> refined{1.0};
  const std::vector<std::vector<double>> orig{{0.0}};
  const auto lsi = seg_improvement_loss(refined, orig);
  CHECK(lsi.value == doctest::Approx(4.5398899216870535e-05).epsilon(1e-12));
  const std::vector<double> r2{0.3, 0.6};
  const std::vector<std::vector<double>> o2{{0.3, 0.6}, {0.3, 0.6}};
  CHECK(std::abs(seg_improvement_loss(r2, o2).value - std::log(2.0)) <= kLn2Tol);
  const std::vector<double> r3{0.45};
  const std::vector<std::vector<double>> o3{{0.2}};
  CHECK(seg_improvement_loss(r3, o3).value ==
        doctest::Approx(neg_log_sigmoid(10.0 * 0.25)).epsilon(1e-12));
}

TEST_CASE("combined loss adds values and concatenates gradients") {
  LossValue t{std::log(2.0), {VectorXd::Ones(2)}};
  LossValue s{std::log(2.0), {VectorXd::Constant(3, 2.0)}};
  const auto c = combined_preference_loss(t, s);
  CHECK(c.value == doctest::Approx(2.0 * std::log(2.0)).epsilon(1e-15));
  REQUIRE(c.gradients.size() == 2);
  LossValue gated{0.0, {VectorXd::Zero(3)}};
  CHECK(combined_preference_loss(t, gated).value == t.value);
}

TEST_CASE("finite difference harness: quadratic, paper losses and a negative control") {
  const VectorXd x0 = (VectorXd(3) << 0.3, -1.2, 2.0).finished();
  const ScalarFunction quad = [](const VectorXd& x) { return x.squaredNorm() + x[0] * x[1]; };
  VectorXd g(3);
  g << 2 * x0[0] + x0[1], 2 * x0[1] + x0[0], 2 * x0[2];
  const auto ok = finite_difference_check(quad, x0, g, kFdStep, kFdTol);
  CHECK(ok.passed);
  CHECK(ok.max_absolute_error < 1e-10);

  VectorXd wrong = g;
  wrong[1] += 0.01;
  CHECK_FALSE(finite_difference_check(quad, x0, wrong, kFdStep, kFdTol).passed);

  const ScalarFunction nan_fn = [](const VectorXd&) { return std::nan(""); };
  CHECK_THROWS_AS(finite_difference_check(nan_fn, x0, g), NumericError);

  Rng rng(4);
  PreferenceHyper h;
  for (int t = 0; t < 25; ++t) {
    const Embedding best = random_vec(rng, 8), mid = random_vec(rng, 8),
                    worst = random_vec(rng, 8), pol = random_vec(rng, 8);
    const ScalarFunction seg = [&](const VectorXd& f) {
      return seg_preference_loss(f, best, mid, worst, true, h.beta_s).value;
    };
    CHECK(finite_difference_check(seg, pol,
                                  seg_preference_loss(pol, best, mid, worst, true, h.beta_s)
                                      .gradients[0],
                                  kFdStep, kFdTol)
              .passed);

    const auto yc = random_logps(rng, 5), y = random_logps(rng, 5);
    const auto ryc = random_logps(rng, 5), ry = random_logps(rng, 5);
    const IndexList ly{1, 3}, lyc{0};
    const auto base = text_dpo_loss(yc, y, ryc, ry, ly, lyc, h);
    VectorXd p(10), grad(10);
    for (int i = 0; i < 5; ++i) {
      p[i] = yc[i];
      p[5 + i] = y[i];
      grad[i] = base.gradients[0][i];
      grad[5 + i] = base.gradients[1][i];
    }
    const ScalarFunction dpo = [&](const VectorXd& v) {
      std::vector<double> a(v.data(), v.data() + 5), b(v.data() + 5, v.data() + 10);
      return text_dpo_loss(a, b, ryc, ry, ly, lyc, h).value;
    };
    CHECK(finite_difference_check(dpo, p, grad, kFdStep, kFdTol).passed);
  }
}
