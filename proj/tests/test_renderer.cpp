#include <cmath>

#include "doctest.h"
#include "sdfatlas/errors.hpp"
#include "sdfatlas/renderer.hpp"
#include "sdfatlas/rng.hpp"

using namespace sdfatlas;

namespace {

FeatureOctree blob_tree(uint64_t seed) {
  OctreeConfig cfg;
  cfg.leaf_resolution = 0.1;
  cfg.num_levels = 3;
  cfg.feature_dim = 8;
  cfg.bounds = Eigen::AlignedBox3d(Vec3(-2, -2, -2), Vec3(2, 2, 2));
  cfg.dilation_voxels = 2;
  cfg.ray_band_before = 0.02;
  cfg.ray_band_behind = 0.02;
  cfg.init_seed = seed;
  PointCloud c;
  Rng rng(seed);
  for (int i = 0; i < 300; ++i)
    c.points.push_back(
        Vec3(rng.uniform(-0.6, 0.6), rng.uniform(-0.6, 0.6), rng.uniform(-0.6, 0.6)));
  c.sensor_pose = Pose::identity();
  return FeatureOctree::build_from_clouds({c}, cfg);
}

NeuralVolume make_volume(uint64_t seed, int classes = 0) {
  EncodingConfig enc;
  enc.num_frequencies = 4;
  NeuralVolume vol(blob_tree(seed), enc, classes, 0, Pose::identity(), seed, 100.0);
  Rng rng(seed + 7);
  for (double& f : vol.feature_params()) f = rng.uniform(-0.3, 0.3);
  return vol;
}

double rel_err(double a, double b, double floor = 1e-6) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

SamplingConfig test_sampling() {
  SamplingConfig cfg;
  cfg.truncation = 0.1;
  cfg.surface_band = 0.3;
  return cfg;
}

}  // namespace

TEST_SUITE("renderer") {

TEST_CASE("voxel samples stay inside the allocated interval") {
  auto vol = make_volume(3);
  SamplingConfig cfg = test_sampling();
  cfg.n_voxel_samples = 1;
  cfg.n_surface_samples = 1;
  const Ray ray(Vec3(-1.5, 0, 0), Vec3(1, 0, 0));
  const auto ss = sample_ray(vol, ray, 1.2, cfg, 42);
  REQUIRE(ss.valid);
  const auto intervals = vol.octree().voxels_along(ray, 1.2 + cfg.surface_band);
  REQUIRE(!intervals.empty());
  for (double d : ss.depths) {
    const bool in_alloc = std::any_of(intervals.begin(), intervals.end(), [&](auto iv) {
      return d >= iv.first - 1e-12 && d <= iv.second + 1e-12;
    });
    const bool in_band = d >= 1.2 - cfg.surface_band - 1e-12 && d <= 1.2 + cfg.surface_band;
    CHECK((in_alloc || in_band));
  }
}

TEST_CASE("surface samples stay inside the band") {
  auto vol = make_volume(5);
  SamplingConfig cfg = test_sampling();
  cfg.n_voxel_samples = 0;
  cfg.n_surface_samples = 12;
  const Ray ray(Vec3(0, 0, -1.8), Vec3(0, 0, 1));
  const auto ss = sample_ray(vol, ray, 1.5, cfg, 7);
  REQUIRE(ss.valid);
  for (double d : ss.depths) {
    CHECK(d >= 1.5 - cfg.surface_band - 1e-12);
    CHECK(d <= 1.5 + cfg.surface_band + 1e-12);
  }
}

TEST_CASE("stratification puts one sample per sub-interval") {
  auto vol = make_volume(7);
  SamplingConfig cfg = test_sampling();
  cfg.n_voxel_samples = 0;
  cfg.n_surface_samples = 16;
  cfg.dedup_epsilon = 1e-12;
  const Ray ray(Vec3(0, 0, -1.8), Vec3(0, 0, 1));
  const double rhat = 1.5;
  const auto ss = sample_ray(vol, ray, rhat, cfg, 99);
  REQUIRE(ss.valid);
  REQUIRE(ss.depths.size() == 16);
  const double lo = rhat - cfg.surface_band, hi = rhat + cfg.surface_band;
  for (int j = 0; j < 16; ++j) {
    const double a = lo + (hi - lo) * j / 16.0;
    const double b = lo + (hi - lo) * (j + 1) / 16.0;
    CHECK(ss.depths[j] >= a - 1e-12);
    CHECK(ss.depths[j] <= b + 1e-12);
  }
}

TEST_CASE("sampling is deterministic in the seed") {
  auto vol = make_volume(9);
  const SamplingConfig cfg = test_sampling();
  const Ray ray(Vec3(-1.5, 0.05, 0.05), Vec3(1, 0, 0));
  const auto a = sample_ray(vol, ray, 1.4, cfg, 1234);
  const auto b = sample_ray(vol, ray, 1.4, cfg, 1234);
  const auto c = sample_ray(vol, ray, 1.4, cfg, 1235);
  REQUIRE(a.valid);
  CHECK(a.depths == b.depths);
  CHECK(a.depths != c.depths);
}

TEST_CASE("equal consecutive sdf values give zero opacity and zero range") {
  std::vector<double> sdf = {0.4, 0.4, 0.4, 0.4};
  std::vector<double> rho = {1.0, 1.5, 2.0, 2.5};
  const auto rw = compute_range_weights(sdf, rho, 3.0);
  for (double a : rw.alpha) CHECK(a == 0.0);
  CHECK(rw.range == 0.0);
  CHECK(rw.weight_sum == 0.0);
}

TEST_CASE("two-sample opacity worked example") {
  // xi=2, s1=0.5, s2=-0.5: alpha_1 = (0.73106 - 0.26894) / 0.73106 = 0.63212.
  std::vector<double> sdf = {0.5, -0.5};
  std::vector<double> rho = {1.0, 2.0};
  const auto rw = compute_range_weights(sdf, rho, 2.0);
  CHECK(rw.phi[0] == doctest::Approx(0.7310586).epsilon(1e-6));
  CHECK(rw.phi[1] == doctest::Approx(0.2689414).epsilon(1e-6));
  CHECK(rw.alpha[0] == doctest::Approx(0.6321206).epsilon(1e-6));
}

TEST_CASE("single opaque sample takes the whole range") {
  std::vector<double> sdf = {10.0, 10.0, -50.0};
  std::vector<double> rho = {0.5, 2.0, 3.0};
  const auto rw = compute_range_weights(sdf, rho, 1.0);
  CHECK(rw.alpha[0] == doctest::Approx(0.0));
  CHECK(rw.alpha[1] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(rw.range == doctest::Approx(2.0).epsilon(1e-9));
}

TEST_CASE("opacity invariants over random stacks") {
  Rng rng(17);
  for (int trial = 0; trial < 10000; ++trial) {
    const int n = 2 + static_cast<int>(rng.uniform_index(20));
    std::vector<double> sdf(n), rho(n);
    double t = rng.uniform(0.1, 1.0);
    for (int i = 0; i < n; ++i) {
      sdf[i] = rng.uniform(-2.0, 2.0);
      rho[i] = t;
      t += rng.uniform(0.01, 0.5);
    }
    const double xi = rng.uniform(0.5, 30.0);
    const auto rw = compute_range_weights(sdf, rho, xi);
    double wsum = 0;
    for (int i = 0; i < n; ++i) {
      CHECK(rw.alpha[i] >= 0.0);
      CHECK(rw.alpha[i] <= 1.0);
      if (i > 0) CHECK(rw.trans[i] <= rw.trans[i - 1] + 1e-12);
      wsum += rw.weight[i];
    }
    CHECK(wsum <= 1.0 + 1e-9);
    CHECK(wsum == doctest::Approx(rw.weight_sum));
  }
}

TEST_CASE("rendered range converges to the zero crossing of a linear sdf") {
  // Sharp temperature so the sigmoid bias is far below the sample spacing.
  const double d_star = 5.0;
  const double spacing = 0.01;
  const double xi = 30.0;
  std::vector<double> sdf, rho;
  for (double t = d_star - 0.6; t <= d_star + 0.6; t += spacing) {
    rho.push_back(t);
    sdf.push_back(d_star - t);
  }
  const auto rw = compute_range_weights(sdf, rho, xi);
  CHECK(std::abs(rw.range - d_star) < spacing);
}

TEST_CASE("extra samples in constant positive regions do not change the range") {
  std::vector<double> sdf = {2.0, 2.0, 1.0, 0.3, -0.3, -0.8};
  std::vector<double> rho = {0.5, 1.0, 2.0, 2.7, 3.3, 3.8};
  const double xi = 4.0;
  const double r0 = compute_range_weights(sdf, rho, xi).range;
  std::vector<double> sdf2 = {2.0, 2.0, 2.0, 2.0, 1.0, 0.3, -0.3, -0.8};
  std::vector<double> rho2 = {0.3, 0.5, 0.7, 1.0, 2.0, 2.7, 3.3, 3.8};
  const double r1 = compute_range_weights(sdf2, rho2, xi).range;
  CHECK(std::abs(r0 - r1) < 1e-6);
}

TEST_CASE("weight backward matches finite differences") {
  Rng rng(23);
  for (int trial = 0; trial < 50; ++trial) {
    const int n = 2 + static_cast<int>(rng.uniform_index(10));
    std::vector<double> sdf(n), rho(n);
    double t = rng.uniform(0.5, 1.0);
    for (int i = 0; i < n; ++i) {
      sdf[i] = rng.uniform(-1.5, 1.5);
      rho[i] = t;
      t += rng.uniform(0.05, 0.4);
    }
    const double xi = rng.uniform(0.5, 8.0);
    std::vector<double> dw(n);
    for (int i = 0; i < n; ++i) dw[i] = rng.uniform(-1, 1);
    const double d_range = rng.uniform(-1, 1);

    auto loss = [&](std::span<const double> s, double x) {
      const auto rw = compute_range_weights(s, rho, x);
      double l = d_range * rw.range;
      for (int i = 0; i < n; ++i) l += dw[i] * rw.weight[i];
      return l;
    };

    const auto rw = compute_range_weights(sdf, rho, xi);
    std::vector<double> d_sdf(n, 0.0);
    double d_xi = 0;
    backward_range_weights(rw, sdf, rho, xi, d_range, dw, d_sdf, d_xi);

    const double h = 1e-6;
    bool near_kink = false;
    for (int i = 0; i < n; ++i)
      if (std::abs(rw.alpha[i]) < 1e-5) near_kink = true;
    if (near_kink) continue;  // clamped-opacity kink; subgradient not FD-comparable
    for (int i = 0; i < n; ++i) {
      std::vector<double> sp = sdf, sm = sdf;
      sp[i] += h;
      sm[i] -= h;
      const double fd = (loss(sp, xi) - loss(sm, xi)) / (2 * h);
      CHECK(rel_err(fd, d_sdf[i], 1e-5) < 1e-5);
    }
    const double fdxi = (loss(sdf, xi + h) - loss(sdf, xi - h)) / (2 * h);
    CHECK(rel_err(fdxi, d_xi, 1e-5) < 1e-5);
  }
}

TEST_CASE("render handles outside-map samples without aborting") {
  auto vol = make_volume(31);
  RaySampleSet ss;
  ss.ray = Ray(Vec3(-1.9, 0, 0), Vec3(1, 0, 0));
  ss.depths = {0.1, 0.2, 1.5, 1.6, 1.7};  // first two are outside the blob
  ss.measured_range = 1.6;
  ss.free_sdf = 0.9;
  ss.valid = true;
  const auto res = render_range(vol, ss);
  CHECK(res.in_map[0] == 0);
  CHECK(res.sdf[0] == 0.9);
  CHECK(std::isfinite(res.range));
}

TEST_CASE("semantic rendering wires the weight stack") {
  auto vol = make_volume(37, 4);
  SamplingConfig cfg = test_sampling();
  const Ray ray(Vec3(-1.5, 0.02, 0.02), Vec3(1, 0, 0));
  const auto ss = sample_ray(vol, ray, 1.4, cfg, 5);
  REQUIRE(ss.valid);
  const auto res = render_full(vol, ss, true);
  REQUIRE(res.has_semantics);
  VecX manual = VecX::Zero(4);
  for (std::size_t i = 0; i < ss.size(); ++i)
    if (res.in_map[i]) manual += res.weights.weight[i] * res.sample_probs.col(i);
  CHECK((res.class_scores - manual).norm() < 1e-12);

  // all-equal sdf -> all-zero weights -> zero scores
  RaySampleSet flat;
  flat.ray = ray;
  flat.depths = {1.0, 1.1, 1.2};
  flat.measured_range = 1.1;
  flat.valid = true;
  auto vol2 = make_volume(38, 4);
  for (double& f : vol2.feature_params()) f = 0.0;
  auto mp = vol2.mlp_params();
  for (double& w : mp) w = 0.0;
  mp[vol2.mlp().offset_b3()] = 0.5;
  const auto flat_res = render_full(vol2, flat, true);
  CHECK(flat_res.class_scores.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("semantic render on a geometry-only volume is an error") {
  auto vol = make_volume(41);
  RaySampleSet ss;
  ss.ray = Ray(Vec3(-1.5, 0, 0), Vec3(1, 0, 0));
  ss.depths = {1.0, 1.1};
  ss.measured_range = 1.05;
  ss.valid = true;
  CHECK_THROWS_AS(render_semantics(vol, ss), ConfigError);
}

TEST_CASE("render backward: zero upstream gives zero gradients") {
  auto vol = make_volume(43);
  SamplingConfig cfg = test_sampling();
  const Ray ray(Vec3(-1.5, 0.02, 0.02), Vec3(1, 0, 0));
  const auto ss = sample_ray(vol, ray, 1.3, cfg, 5);
  REQUIRE(ss.valid);
  const auto res = render_range(vol, ss);
  RenderGrads grads;
  grads.mlp = VecX::Zero(vol.mlp().parameter_count());
  grads.features.feature_dim = vol.octree().feature_dim();
  const Pose pose = Pose::identity();
  render_backward(vol, res, 0.0, nullptr, &pose, true, grads);
  CHECK(grads.mlp.cwiseAbs().maxCoeff() == 0.0);
  CHECK(grads.pose.norm() == 0.0);
  CHECK(grads.log_xi == 0.0);
}

TEST_CASE("render backward matches finite differences") {
  auto vol = make_volume(47, 3);
  SamplingConfig cfg = test_sampling();
  // Sensor pose with rotation so the pose chain is exercised.
  const Pose sensor(Eigen::AngleAxisd(0.4, Vec3(0.2, 1.0, 0.3).normalized()).toRotationMatrix(),
                    Vec3(-1.4, 0.1, 0.05));
  const Ray sensor_ray(Vec3::Zero(), Vec3(1, 0.05, -0.02).normalized());
  const Ray vray = transform_ray(sensor, sensor_ray);
  const auto ss = sample_ray(vol, vray, 1.3, cfg, 5);
  REQUIRE(ss.valid);
  const auto res = render_full(vol, ss, true);

  Rng rng(471);
  VecX d_scores(3);
  d_scores << rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1);
  const double d_range = rng.uniform(0.5, 1.5);

  RenderGrads grads;
  render_backward(vol, res, d_range, &d_scores, &sensor, true, grads);

  auto loss_now = [&](const RaySampleSet& s) {
    const auto r = render_full(vol, s, true);
    return d_range * r.range + d_scores.dot(r.class_scores);
  };

  const double h = 1e-6;
  // Field parameters (features in the stencil + mlp picks).
  std::vector<std::size_t> picks;
  const InterpResult ctx = vol.octree().interpolate(vray.at(ss.depths[ss.size() / 2]), false, false);
  if (ctx.ok)
    for (int k = 0; k < 6; ++k)
      picks.push_back(static_cast<std::size_t>(ctx.corners[k]) * vol.octree().feature_dim() +
                      k % vol.octree().feature_dim());
  for (int k = 0; k < 10; ++k)
    picks.push_back(vol.mlp_offset() + (k * 977) % vol.mlp().parameter_count());

  VecX dense = VecX::Zero(vol.parameter_count());
  std::span<double> feat_span(dense.data(), vol.octree().parameter_count());
  grads.features.scatter_into(feat_span);
  dense.segment(vol.mlp_offset(), vol.mlp().parameter_count()) = grads.mlp;

  for (std::size_t idx : picks) {
    const double old = vol.parameter(idx);
    vol.set_parameter(idx, old + h);
    const double lp = loss_now(ss);
    vol.set_parameter(idx, old - h);
    const double lm = loss_now(ss);
    vol.set_parameter(idx, old);
    const double fd = (lp - lm) / (2 * h);
    CHECK(rel_err(fd, dense(idx), 1e-5) < 1e-4);
  }

  // log_xi.
  {
    const double old = vol.log_xi();
    vol.set_log_xi(old + h);
    const double lp = loss_now(ss);
    vol.set_log_xi(old - h);
    const double lm = loss_now(ss);
    vol.set_log_xi(old);
    CHECK(rel_err((lp - lm) / (2 * h), grads.log_xi, 1e-6) < 1e-4);
  }

  // Pose tangent through exp_map: perturb the sensor pose, rebuild positions.
  for (int c = 0; c < 6; ++c) {
    Vec6 dv = Vec6::Zero();
    dv[c] = h;
    auto perturbed = [&](double sign) {
      const Pose p2 = sensor * exp_map(Twist::from_vector(sign * dv));
      RaySampleSet s2 = ss;
      s2.ray = transform_ray(p2, sensor_ray);
      return loss_now(s2);
    };
    const double fd = (perturbed(1.0) - perturbed(-1.0)) / (2 * h);
    CHECK(rel_err(fd, grads.pose[c], 1e-5) < 1e-3);
  }
}

}  // TEST_SUITE
