#include <cmath>

#include "doctest.h"
#include "sdfatlas/losses.hpp"
#include "sdfatlas/rng.hpp"

using namespace sdfatlas;

TEST_SUITE("losses") {

TEST_CASE("range loss") {
  CHECK(range_loss(5.0, 5.0, 0.1) == 0.0);
  CHECK(range_loss(5.1, 5.0, 0.1) == doctest::Approx(0.5));  // one-sigma residual
  CHECK(range_loss(10.0, 9.0, 0.1) == doctest::Approx(50.0));
}

TEST_CASE("sdf loss near and far branches") {
  const double tau = 0.3, bw = 0.05, beta = 10.0;
  CHECK(sdf_loss(0.2, 0.2, tau, bw, beta) == 0.0);                 // near, s = b
  CHECK(sdf_loss(1.0, 0.5, tau, bw, beta) == 0.0);                 // far, 0 < s < b
  CHECK(sdf_loss(1.0, -0.1, tau, bw, beta) ==
        doctest::Approx(std::exp(1.0) - 1.0));                     // far, worked example
  CHECK(sdf_loss(0.1, 0.15, tau, bw, beta) == doctest::Approx(1.0));  // |b-s|/bw
}

TEST_CASE("sdf loss subgradients match the branches") {
  const double tau = 0.3, bw = 0.05, beta = 10.0;
  CHECK(sdf_loss_grad(0.1, 0.15, tau, bw, beta) == doctest::Approx(20.0));
  CHECK(sdf_loss_grad(0.1, 0.05, tau, bw, beta) == doctest::Approx(-20.0));
  CHECK(sdf_loss_grad(1.0, 0.5, tau, bw, beta) == 0.0);
  CHECK(sdf_loss_grad(1.0, -0.1, tau, bw, beta) ==
        doctest::Approx(-beta * std::exp(1.0)));
  CHECK(sdf_loss_grad(1.0, 1.5, tau, bw, beta) == doctest::Approx(1.0));
}

TEST_CASE("semantic loss") {
  VecX uniform = VecX::Zero(19);
  CHECK(semantic_loss(uniform, 3) == doctest::Approx(std::log(19.0)));
  VecX peaked = VecX::Zero(4);
  peaked(2) = 40.0;
  CHECK(semantic_loss(peaked, 2) < 1e-12);
  Rng rng(5);
  for (int i = 0; i < 100; ++i) {
    VecX scores(7);
    for (int c = 0; c < 7; ++c) scores(c) = rng.uniform(-3, 3);
    CHECK(semantic_loss(scores, rng.uniform_index(7)) >= 0.0);
  }
  CHECK_THROWS_AS(semantic_loss(uniform, 19), DataError);
}

TEST_CASE("semantic loss gradient sums to zero") {
  Rng rng(7);
  VecX scores(5);
  for (int c = 0; c < 5; ++c) scores(c) = rng.uniform(-2, 2);
  const VecX g = semantic_loss_grad(scores, 1);
  CHECK(std::abs(g.sum()) < 1e-12);
  const double h = 1e-6;
  for (int c = 0; c < 5; ++c) {
    VecX sp = scores, sm = scores;
    sp(c) += h;
    sm(c) -= h;
    const double fd = (semantic_loss(sp, 1) - semantic_loss(sm, 1)) / (2 * h);
    CHECK(std::abs(fd - g(c)) < 1e-8);
  }
}

TEST_CASE("eikonal and smoothness") {
  CHECK(eikonal_loss(Vec3(0, 0, 1), 1.0) == 0.0);
  CHECK(eikonal_loss(Vec3(0, 0, 2), 1.0) == doctest::Approx(0.5));
  CHECK(smoothness_loss(Vec3(1, 2, 3), Vec3(1, 2, 3), 1.0) == 0.0);
  const Vec3 a(0.3, -0.5, 1.1), b(0.1, 0.2, 0.9);
  const double h = 1e-7;
  const Vec3 ge = eikonal_loss_grad(a, 0.7);
  auto [ga, gb] = smoothness_loss_grad(a, b, 0.8);
  for (int c = 0; c < 3; ++c) {
    Vec3 dp = Vec3::Zero();
    dp[c] = h;
    CHECK(std::abs((eikonal_loss(a + dp, 0.7) - eikonal_loss(a - dp, 0.7)) / (2 * h) - ge[c]) <
          1e-6);
    CHECK(std::abs((smoothness_loss(a + dp, b, 0.8) - smoothness_loss(a - dp, b, 0.8)) /
                       (2 * h) -
                   ga[c]) < 1e-6);
    CHECK(std::abs((smoothness_loss(a, b + dp, 0.8) - smoothness_loss(a, b - dp, 0.8)) /
                       (2 * h) -
                   gb[c]) < 1e-6);
  }
}

}  // TEST_SUITE
