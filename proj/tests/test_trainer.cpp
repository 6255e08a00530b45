#include <cmath>

#include "doctest.h"
#include "sdfatlas/errors.hpp"
#include "sdfatlas/trainer.hpp"

using namespace sdfatlas;

namespace {

// Room interior: floor z=0 and walls x=+-1, y=+-1, scanned with an
// azimuth/elevation beam fan. Opposing walls keep the pose fully observable.
double room_hit(const Vec3& o, const Vec3& d) {
  double t_hit = std::numeric_limits<double>::infinity();
  if (d.z() < -1e-9) t_hit = std::min(t_hit, (0.0 - o.z()) / d.z());
  if (d.x() > 1e-9) t_hit = std::min(t_hit, (1.0 - o.x()) / d.x());
  if (d.x() < -1e-9) t_hit = std::min(t_hit, (-1.0 - o.x()) / d.x());
  if (d.y() > 1e-9) t_hit = std::min(t_hit, (1.0 - o.y()) / d.y());
  if (d.y() < -1e-9) t_hit = std::min(t_hit, (-1.0 - o.y()) / d.y());
  return t_hit;
}

PointCloud scan_room(const Pose& sensor, int az = 60, int el = 10) {
  PointCloud c;
  for (int i = 0; i < az; ++i) {
    const double a = 2 * M_PI * i / az;
    for (int j = 0; j < el; ++j) {
      const double e = -1.0 + 1.15 * j / (el - 1);
      const Vec3 d_s(std::cos(a) * std::cos(e), std::sin(a) * std::cos(e), std::sin(e));
      const double t = room_hit(sensor.translation(), sensor.rotation() * d_s);
      if (!std::isfinite(t) || t > 6.0 || t < 0.15) continue;
      c.points.push_back(d_s * t);
    }
  }
  return c;
}

struct SceneFixture {
  NeuralVolume vol;
  std::vector<Frame> frames;
  SamplingConfig sampling;
  LossWeights weights;
  TrainConfig cfg;
};

SceneFixture make_fixture(uint64_t seed, int classes = 0) {
  SceneFixture fx;
  fx.sampling.n_voxel_samples = 6;
  fx.sampling.n_surface_samples = 6;
  fx.sampling.truncation = 0.1;
  fx.sampling.surface_band = 0.3;
  fx.sampling.max_range = 25.0;

  fx.weights.tau = 0.1;
  fx.weights.sdf_bandwidth = 0.03;
  fx.weights.smooth_delta = 0.05;

  fx.cfg.iterations = 0;
  fx.cfg.rays_per_batch = 128;
  fx.cfg.seed = seed;
  fx.cfg.threads = 2;
  fx.cfg.pose_refinement = false;

  const Pose s0(Mat3::Identity(), Vec3(-0.25, -0.2, 0.55));
  const Pose s1(Eigen::AngleAxisd(0.5, Vec3::UnitZ()).toRotationMatrix(),
                Vec3(0.25, 0.1, 0.5));
  const Pose s2(Eigen::AngleAxisd(-0.3, Vec3::UnitZ()).toRotationMatrix(),
                Vec3(0.0, 0.25, 0.6));
  for (const Pose& p : {s0, s1, s2}) {
    Frame f;
    f.pose = p;
    f.cloud = scan_room(p);
    f.cloud.sensor_pose = p;
    fx.frames.push_back(std::move(f));
  }

  OctreeConfig oc;
  oc.leaf_resolution = 0.05;
  oc.num_levels = 3;
  oc.feature_dim = 8;
  oc.bounds = Eigen::AlignedBox3d(Vec3(-1.3, -1.3, -0.3), Vec3(1.3, 1.3, 1.2));
  oc.dilation_voxels = 1;
  oc.ray_band_before = fx.sampling.surface_band;
  oc.ray_band_behind = fx.sampling.truncation;
  oc.init_seed = seed;

  std::vector<PointCloud> clouds;
  for (const auto& f : fx.frames) clouds.push_back(f.cloud);
  EncodingConfig enc;
  enc.num_frequencies = 4;
  fx.vol = NeuralVolume(FeatureOctree::build_from_clouds(clouds, oc), enc, classes, 0,
                        Pose::identity(), seed, 100.0);
  return fx;
}

std::vector<double> snapshot_params(const NeuralVolume& vol) {
  std::vector<double> out(vol.parameter_count());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = vol.parameter(i);
  return out;
}

}  // namespace

TEST_SUITE("trainer") {

TEST_CASE("all-zero weights leave parameters untouched") {
  SceneFixture fx = make_fixture(3);
  fx.weights.lambda_range = 0;
  fx.weights.lambda_sdf = 0;
  fx.weights.lambda_semantic = 0;
  fx.weights.lambda_eikonal = 0;
  fx.weights.lambda_smooth = 0;
  fx.cfg.iterations = 3;
  const auto before = snapshot_params(fx.vol);
  train_volume(fx.vol, fx.frames, fx.weights, fx.sampling, fx.cfg);
  const auto after = snapshot_params(fx.vol);
  CHECK(before == after);
}

TEST_CASE("gradient check without priors") {
  SceneFixture fx = make_fixture(5);
  fx.weights.lambda_eikonal = 0;
  fx.weights.lambda_smooth = 0;
  fx.cfg.rays_per_batch = 24;
  fx.cfg.pose_refinement = true;
  fx.frames[1].pose_fixed = false;
  fx.frames[2].pose_fixed = false;
  const auto res =
      total_gradient_check(fx.vol, fx.frames, fx.weights, fx.sampling, fx.cfg, 80);
  CHECK(res.checked > 40);
  CHECK(res.max_rel_error < 1e-4);
}

TEST_CASE("gradient check with priors exercises the double backward") {
  SceneFixture fx = make_fixture(7);
  fx.cfg.rays_per_batch = 24;
  const auto res =
      total_gradient_check(fx.vol, fx.frames, fx.weights, fx.sampling, fx.cfg, 80);
  CHECK(res.checked > 40);
  CHECK(res.max_rel_error < 1e-3);
}

TEST_CASE("gradient check of the zero objective is exactly zero") {
  SceneFixture fx = make_fixture(9);
  fx.weights.lambda_range = 0;
  fx.weights.lambda_sdf = 0;
  fx.weights.lambda_semantic = 0;
  fx.weights.lambda_eikonal = 0;
  fx.weights.lambda_smooth = 0;
  fx.cfg.rays_per_batch = 16;
  const auto res = total_gradient_check(fx.vol, fx.frames, fx.weights, fx.sampling, fx.cfg, 30);
  CHECK(res.max_rel_error == 0.0);
}

TEST_CASE("scaling every lambda preserves the gradient direction") {
  SceneFixture fx = make_fixture(11);
  fx.cfg.rays_per_batch = 32;
  const auto g1 = evaluate_objective_gradient(fx.vol, fx.frames, fx.weights, fx.sampling, fx.cfg);
  LossWeights w3 = fx.weights;
  w3.lambda_range *= 3;
  w3.lambda_sdf *= 3;
  w3.lambda_semantic *= 3;
  w3.lambda_eikonal *= 3;
  w3.lambda_smooth *= 3;
  const auto g3 = evaluate_objective_gradient(fx.vol, fx.frames, w3, fx.sampling, fx.cfg);
  const double cosine = g1.params.dot(g3.params) / (g1.params.norm() * g3.params.norm());
  CHECK(cosine == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(g3.stats.total == doctest::Approx(3.0 * g1.stats.total).epsilon(1e-9));
}

TEST_CASE("training is deterministic for a fixed seed in single-worker mode") {
  auto run = [] {
    SceneFixture fx = make_fixture(13);
    fx.cfg.iterations = 8;
    fx.cfg.rays_per_batch = 64;
    fx.cfg.threads = 1;
    const auto report = train_volume(fx.vol, fx.frames, fx.weights, fx.sampling, fx.cfg);
    return std::make_pair(report, snapshot_params(fx.vol));
  };
  const auto a = run();
  const auto b = run();
  REQUIRE(a.first.history.size() == b.first.history.size());
  for (std::size_t i = 0; i < a.first.history.size(); ++i)
    CHECK(a.first.history[i].total == b.first.history[i].total);
  CHECK(a.second == b.second);
}

TEST_CASE("nan in parameters aborts with a numerical error") {
  SceneFixture fx = make_fixture(15);
  fx.cfg.iterations = 2;
  fx.vol.set_parameter(fx.vol.mlp_offset() + fx.vol.mlp().offset_b3(),
                       std::numeric_limits<double>::quiet_NaN());
  CHECK_THROWS_AS(train_volume(fx.vol, fx.frames, fx.weights, fx.sampling, fx.cfg),
                  NumericalError);
}

TEST_CASE("corner-room scene converges to small surface sdf") {
  SceneFixture fx = make_fixture(17);
  fx.cfg.iterations = 500;
  fx.cfg.rays_per_batch = 128;
  const double tau = fx.weights.tau;

  // Eikonal residual before training, at near-surface scan points.
  auto eikonal_residual = [&] {
    double sum = 0;
    int count = 0;
    for (const auto& f : fx.frames) {
      for (std::size_t i = 0; i < f.cloud.points.size(); i += 7) {
        const Vec3 p = f.pose * f.cloud.points[i];
        const FieldOutput out = fx.vol.query(p, true, false);
        if (!out.ok) continue;
        const double e = 1.0 - out.sdf_gradient.norm();
        sum += e * e;
        ++count;
      }
    }
    return sum / std::max(count, 1);
  };
  const double eik_before = eikonal_residual();

  const auto report = train_volume(fx.vol, fx.frames, fx.weights, fx.sampling, fx.cfg);
  CHECK(report.history.size() == 500);
  CHECK(report.final_stats.total < report.history.front().total);

  double abs_sdf = 0;
  int count = 0;
  for (const auto& f : fx.frames) {
    for (std::size_t i = 0; i < f.cloud.points.size(); i += 3) {
      const Vec3 p = f.pose * f.cloud.points[i];
      const FieldOutput out = fx.vol.query(p, false, false);
      if (!out.ok) continue;
      abs_sdf += std::abs(out.sdf);
      ++count;
    }
  }
  REQUIRE(count > 50);
  CHECK(abs_sdf / count < tau / 2);
  CHECK(eikonal_residual() < eik_before);
}

TEST_CASE("pose refinement recovers an injected perturbation") {
  SceneFixture fx = make_fixture(19);
  fx.cfg.iterations = 600;
  fx.cfg.rays_per_batch = 192;
  fx.cfg.pose_refinement = true;
  fx.cfg.lr_pose = 2e-3;

  const Pose true_pose = fx.frames[2].pose;
  Twist err;
  err.omega = Vec3(0.02, -0.03, 0.02);
  err.nu = Vec3(0.12, -0.1, 0.09);  // ~0.18 m offset
  fx.frames[2].pose = true_pose * exp_map(err);
  fx.frames[2].pose_fixed = false;

  train_volume(fx.vol, fx.frames, fx.weights, fx.sampling, fx.cfg);
  const Twist residual = log_map(true_pose.inverse() * fx.frames[2].pose);
  CHECK(residual.nu.norm() < 0.05);
  CHECK(residual.omega.norm() < 0.05);
}

}  // TEST_SUITE
