#include <cmath>

#include "doctest.h"
#include "sdfatlas/geometry.hpp"
#include "sdfatlas/rng.hpp"

using namespace sdfatlas;

namespace {

Pose rot_z(double angle, const Vec3& t = Vec3::Zero()) {
  return Pose(Eigen::AngleAxisd(angle, Vec3::UnitZ()).toRotationMatrix(), t);
}

Twist random_twist(Rng& rng, double omega_max, double nu_max) {
  Twist xi;
  for (int i = 0; i < 3; ++i) {
    xi.omega[i] = rng.uniform(-omega_max, omega_max);
    xi.nu[i] = rng.uniform(-nu_max, nu_max);
  }
  return xi;
}

}  // namespace

TEST_SUITE("geometry") {

TEST_CASE("compose identity and inverse") {
  Rng rng(7);
  const Pose p = exp_map(random_twist(rng, 2.0, 5.0));
  const Pose pi = compose(Pose::identity(), p);
  CHECK((pi.rotation() - p.rotation()).norm() == doctest::Approx(0).epsilon(1e-12));
  const Pose e = compose(p, p.inverse());
  CHECK(e.orthonormality_error() < 1e-9);
  CHECK((e.rotation() - Mat3::Identity()).norm() < 1e-9);
  CHECK(e.translation().norm() < 1e-9);
}

TEST_CASE("compose worked example") {
  // Two quarter turns with unit x steps meet at a half turn, t = (1,1,0).
  const Pose a = rot_z(M_PI / 2, Vec3(1, 0, 0));
  const Pose c = compose(a, a);
  const Pose expect = rot_z(M_PI, Vec3(1, 1, 0));
  CHECK((c.rotation() - expect.rotation()).norm() < 1e-12);
  CHECK((c.translation() - expect.translation()).norm() < 1e-12);
}

TEST_CASE("transform_point basics") {
  CHECK((transform_point(Pose::identity(), Vec3(1, 2, 3)) - Vec3(1, 2, 3)).norm() == 0);
  const Pose t(Mat3::Identity(), Vec3(0, 0, 5));
  CHECK((transform_point(t, Vec3::Zero()) - Vec3(0, 0, 5)).norm() == 0);
  CHECK((transform_point(rot_z(M_PI / 2), Vec3(1, 0, 0)) - Vec3(0, 1, 0)).norm() < 1e-12);
}

TEST_CASE("transform compose associativity on points") {
  Rng rng(11);
  for (int i = 0; i < 100; ++i) {
    const Pose a = exp_map(random_twist(rng, 2.5, 4.0));
    const Pose b = exp_map(random_twist(rng, 2.5, 4.0));
    const Vec3 p(rng.uniform(-3, 3), rng.uniform(-3, 3), rng.uniform(-3, 3));
    const Vec3 lhs = transform_point(compose(a, b), p);
    const Vec3 rhs = transform_point(a, transform_point(b, p));
    CHECK((lhs - rhs).norm() < 1e-9);
    CHECK(compose(a, b).orthonormality_error() < 1e-9);
  }
}

TEST_CASE("exp of zero is identity") {
  const Pose p = exp_map(Twist{});
  CHECK((p.rotation() - Mat3::Identity()).norm() == 0);
  CHECK(p.translation().norm() == 0);
}

TEST_CASE("exp matches Rodrigues oracle for a quarter turn") {
  Twist xi;
  xi.omega = Vec3(0, 0, M_PI / 2);
  xi.nu = Vec3(1, 0, 0);
  const Pose p = exp_map(xi);
  CHECK((p.rotation() - rot_z(M_PI / 2).rotation()).norm() < 1e-12);
  // V-matrix applied to nu; oracle from the closed-form left jacobian.
  const Vec3 t_expect = so3_left_jacobian(xi.omega) * xi.nu;
  CHECK((p.translation() - t_expect).norm() < 1e-14);
}

TEST_CASE("exp/log round trip") {
  Rng rng(23);
  for (int i = 0; i < 1000; ++i) {
    const Twist xi = random_twist(rng, 3.0 / std::sqrt(3.0), 5.0);
    const Twist back = log_map(exp_map(xi));
    CHECK((back.omega - xi.omega).norm() < 1e-8);
    CHECK((back.nu - xi.nu).norm() < 1e-8);
  }
}

TEST_CASE("log at pi reports the ambiguity") {
  const Pose p = rot_z(M_PI);
  CHECK_THROWS_AS(log_map(p), std::domain_error);
}

TEST_CASE("se3 right jacobian matches finite differences") {
  Rng rng(31);
  for (int trial = 0; trial < 20; ++trial) {
    const Twist xi = random_twist(rng, 0.8, 1.5);
    const Mat6 jr = se3_right_jacobian(xi);
    const double h = 1e-6;
    for (int c = 0; c < 6; ++c) {
      Vec6 dv = Vec6::Zero();
      dv[c] = h;
      // exp(xi (+) h e_c) ~ exp(xi) exp(Jr h e_c)
      const Twist xp = Twist::from_vector(xi.vector() + dv);
      const Twist xm = Twist::from_vector(xi.vector() - dv);
      const Twist dplus = log_map(exp_map(xi).inverse() * exp_map(xp));
      const Twist dminus = log_map(exp_map(xi).inverse() * exp_map(xm));
      const Vec6 fd = (dplus.vector() - dminus.vector()) / (2 * h);
      CHECK((fd - jr.col(c)).norm() < 1e-6);
    }
  }
}

TEST_CASE("se3 right jacobian inverse") {
  Rng rng(37);
  const Twist xi = random_twist(rng, 1.0, 2.0);
  const Mat6 j = se3_right_jacobian(xi) * se3_right_jacobian_inv(xi);
  CHECK((j - Mat6::Identity()).norm() < 1e-10);
}

TEST_CASE("kitti pose text round trip") {
  Rng rng(41);
  std::vector<Pose> poses;
  for (int i = 0; i < 5; ++i) poses.push_back(exp_map(random_twist(rng, 2.0, 10.0)));
  const std::string path = "test_poses_tmp.txt";
  save_poses_kitti(path, poses);
  const auto loaded = load_poses_kitti(path);
  REQUIRE(loaded.size() == poses.size());
  for (std::size_t i = 0; i < poses.size(); ++i) {
    CHECK((loaded[i].rotation() - poses[i].rotation()).norm() < 1e-12);
    CHECK((loaded[i].translation() - poses[i].translation()).norm() < 1e-12);
    CHECK(loaded[i].orthonormality_error() < 1e-12);
  }
  std::remove(path.c_str());
}

TEST_CASE("quaternion serialization reorthonormalizes") {
  Mat3 drifted = rot_z(0.7).rotation();
  drifted(0, 0) += 3e-4;  // simulate accumulated drift
  const Pose p(drifted, Vec3(1, 2, 3));
  const Pose fixed = p.orthonormalized();
  CHECK(fixed.orthonormality_error() < 1e-12);
}

}  // TEST_SUITE
