#include "sdfatlas/renderer.hpp"

#include <algorithm>
#include <cmath>

#include "sdfatlas/errors.hpp"
#include "sdfatlas/rng.hpp"

namespace sdfatlas {

namespace {

inline double sigmoid_clamped(double t) {
  if (t >= 0) {
    const double e = std::exp(-t);
    return 1.0 / (1.0 + e);
  }
  const double e = std::exp(t);
  return std::max(e / (1.0 + e), 1e-300);
}

}  // namespace

void SamplingConfig::validate() const {
  if (n_voxel_samples < 0 || n_surface_samples < 0)
    throw ConfigError("sampling: sample counts must be >= 0");
  if (n_voxel_samples + n_surface_samples < 2)
    throw ConfigError("sampling: need at least two samples per ray");
  if (!(max_range > 0) || !(truncation > 0) || !(surface_band > 0))
    throw ConfigError("sampling: ranges and bands must be positive");
  if (surface_band < truncation)
    throw ConfigError("sampling: surface_band must be >= truncation");
}

RaySampleSet sample_ray(const FeatureOctree& tree, const Ray& ray, double measured_range,
                        const SamplingConfig& cfg, uint64_t rng_seed) {
  cfg.validate();
  RaySampleSet out;
  out.ray = ray;
  out.measured_range = measured_range;
  out.free_sdf = cfg.free_sdf();
  if (!(measured_range > 0.0) || measured_range > cfg.max_range) return out;

  Rng rng(rng_seed);
  std::vector<double> depths;
  depths.reserve(cfg.n_voxel_samples + cfg.n_surface_samples);

  const double t_cap = std::min(measured_range + cfg.surface_band, cfg.max_range);
  const auto intervals = tree.voxels_along(ray, t_cap);
  double total = 0.0;
  for (const auto& [t0, t1] : intervals) total += t1 - t0;
  if (total > 0.0 && cfg.n_voxel_samples > 0) {
    for (int j = 0; j < cfg.n_voxel_samples; ++j) {
      const double arc = total * (j + rng.uniform()) / cfg.n_voxel_samples;
      double acc = 0.0;
      double t = intervals.back().second;
      for (const auto& [t0, t1] : intervals) {
        const double len = t1 - t0;
        if (arc <= acc + len) {
          t = t0 + (arc - acc);
          break;
        }
        acc += len;
      }
      depths.push_back(t);
    }
  }

  const double lo = std::max(1e-6, measured_range - cfg.surface_band);
  const double hi = std::min(measured_range + cfg.surface_band, cfg.max_range);
  if (hi > lo && cfg.n_surface_samples > 0) {
    for (int j = 0; j < cfg.n_surface_samples; ++j)
      depths.push_back(lo + (hi - lo) * (j + rng.uniform()) / cfg.n_surface_samples);
  }

  std::sort(depths.begin(), depths.end());
  std::vector<double> unique;
  unique.reserve(depths.size());
  for (double d : depths) {
    if (unique.empty() || d - unique.back() > cfg.dedup_epsilon) unique.push_back(d);
  }
  if (unique.size() < 2) return out;
  out.depths = std::move(unique);
  out.valid = true;
  return out;
}

RaySampleSet sample_ray(const NeuralVolume& vol, const Ray& ray, double measured_range,
                        const SamplingConfig& cfg, uint64_t rng_seed) {
  return sample_ray(vol.octree(), ray, measured_range, cfg, rng_seed);
}

RangeWeights compute_range_weights(std::span<const double> sdf, std::span<const double> depth,
                                   double xi) {
  const std::size_t n = sdf.size();
  if (n < 2) throw std::invalid_argument("range weights need at least two samples");
  if (depth.size() != n) throw std::invalid_argument("sdf/depth size mismatch");
  RangeWeights rw;
  rw.phi.resize(n + 1);
  rw.alpha.resize(n);
  rw.trans.resize(n);
  rw.weight.resize(n);
  rw.s_extrapolated = 2.0 * sdf[n - 1] - sdf[n - 2];
  for (std::size_t i = 0; i < n; ++i) rw.phi[i] = sigmoid_clamped(xi * sdf[i]);
  rw.phi[n] = sigmoid_clamped(xi * rw.s_extrapolated);

  double trans = 1.0;
  double range = 0.0, wsum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double raw = 1.0 - rw.phi[i + 1] / rw.phi[i];
    const double a = std::max(raw, 0.0);
    rw.alpha[i] = a;
    rw.trans[i] = trans;
    const double w = trans * a;
    rw.weight[i] = w;
    range += w * depth[i];
    wsum += w;
    trans *= (1.0 - a);
  }
  rw.range = range;
  rw.weight_sum = wsum;
  return rw;
}

void backward_range_weights(const RangeWeights& rw, std::span<const double> sdf,
                            std::span<const double> depth, double xi, double d_range,
                            std::span<const double> d_weight, std::span<double> d_sdf,
                            double& d_xi) {
  const std::size_t n = sdf.size();
  std::vector<double> d_phi(n + 1, 0.0);
  double d_trans_next = 0.0;
  for (std::size_t ii = n; ii-- > 0;) {
    double dw = d_range * depth[ii];
    if (!d_weight.empty()) dw += d_weight[ii];
    double d_alpha = dw * rw.trans[ii];
    double d_trans = dw * rw.alpha[ii];
    if (ii + 1 < n) {
      // T_{i+1} = T_i (1 - alpha_i)
      d_alpha += d_trans_next * (-rw.trans[ii]);
      d_trans += d_trans_next * (1.0 - rw.alpha[ii]);
    }
    d_trans_next = d_trans;
    if (rw.alpha[ii] > 0.0) {
      const double inv_phi = 1.0 / rw.phi[ii];
      d_phi[ii + 1] += d_alpha * (-inv_phi);
      d_phi[ii] += d_alpha * (rw.phi[ii + 1] * inv_phi * inv_phi);
    }
  }
  double ds_ext = 0.0;
  for (std::size_t i = 0; i <= n; ++i) {
    if (d_phi[i] == 0.0) continue;
    const double phi = rw.phi[i];
    const double sprime = phi * (1.0 - phi);
    const double s_in = (i < n) ? sdf[i] : rw.s_extrapolated;
    const double ds = d_phi[i] * xi * sprime;
    d_xi += d_phi[i] * s_in * sprime;
    if (i < n)
      d_sdf[i] += ds;
    else
      ds_ext = ds;
  }
  if (ds_ext != 0.0) {
    d_sdf[n - 1] += 2.0 * ds_ext;
    d_sdf[n - 2] -= ds_ext;
  }
}

RenderResult render_full(const NeuralVolume& vol, const RaySampleSet& samples, bool semantics,
                         std::optional<double> xi_override) {
  if (!samples.valid || samples.size() < 2)
    throw std::invalid_argument("render: sample set invalid or too small");
  if (semantics && !vol.has_semantics())
    throw ConfigError("render_semantics: volume has no semantic head");

  RenderResult res;
  res.samples = samples;
  res.xi = xi_override.value_or(vol.xi());
  const std::size_t n = samples.size();

  std::vector<Vec3> points(n);
  for (std::size_t i = 0; i < n; ++i) points[i] = samples.ray.at(samples.depths[i]);

  FieldBatch fb(vol);
  fb.forward(points, FieldForwardOpts{false, semantics, false, false});

  res.sdf.resize(n);
  res.in_map.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    res.in_map[i] = fb.ok(static_cast<int>(i)) ? 1 : 0;
    res.sdf[i] = res.in_map[i] ? fb.sdf(static_cast<int>(i)) : samples.free_sdf;
  }
  res.weights = compute_range_weights(res.sdf, samples.depths, res.xi);
  res.range = res.weights.range;

  if (semantics) {
    const int c = vol.num_classes();
    res.has_semantics = true;
    res.sample_probs = MatX::Zero(c, static_cast<Eigen::Index>(n));
    res.class_scores = VecX::Zero(c);
    for (std::size_t i = 0; i < n; ++i) {
      if (!res.in_map[i]) continue;
      res.sample_probs.col(i) = fb.class_probs(static_cast<int>(i));
      res.class_scores += res.weights.weight[i] * res.sample_probs.col(i);
    }
  }
  return res;
}

RenderResult render_range(const NeuralVolume& vol, const RaySampleSet& samples,
                          std::optional<double> xi_override) {
  return render_full(vol, samples, false, xi_override);
}

VecX render_semantics(const NeuralVolume& vol, const RaySampleSet& samples,
                      std::optional<double> xi_override) {
  return render_full(vol, samples, true, xi_override).class_scores;
}

void render_backward(const NeuralVolume& vol, const RenderResult& result, double d_range,
                     const VecX* d_class_scores, const Pose* sensor_pose, bool want_params,
                     RenderGrads& out) {
  const std::size_t n = result.samples.size();
  const bool sem = d_class_scores != nullptr;
  if (sem && !result.has_semantics)
    throw std::invalid_argument("render_backward: semantic upstream without semantic render");

  // d loss / d weight_n via the semantic path, then the shared weight stack.
  std::vector<double> d_weight;
  if (sem) {
    d_weight.assign(n, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      if (result.in_map[i]) d_weight[i] = result.sample_probs.col(i).dot(*d_class_scores);
  }
  std::vector<double> d_sdf(n, 0.0);
  double d_xi = 0.0;
  backward_range_weights(result.weights, result.sdf, result.samples.depths, result.xi, d_range,
                         d_weight, d_sdf, d_xi);

  // Field backward needs a fresh forward pass (the render result does not
  // retain MLP activations).
  std::vector<Vec3> points(n);
  for (std::size_t i = 0; i < n; ++i) points[i] = result.samples.ray.at(result.samples.depths[i]);
  FieldBatch fb(vol);
  FieldForwardOpts opts;
  opts.semantics = sem;
  opts.point_grad_ctx = sensor_pose != nullptr;
  fb.forward(points, opts);

  MatX d_logits;
  if (sem) {
    const int c = vol.num_classes();
    d_logits = MatX::Zero(c, static_cast<Eigen::Index>(n));
    for (std::size_t i = 0; i < n; ++i) {
      if (!result.in_map[i]) continue;
      const VecX p = result.sample_probs.col(i);
      const VecX up = result.weights.weight[i] * (*d_class_scores);
      d_logits.col(i) = p.cwiseProduct(up - VecX::Constant(p.size(), p.dot(up)));
    }
  }

  FeatureGradSink* feat_sink = nullptr;
  VecX* mlp_sink = nullptr;
  if (want_params) {
    if (out.mlp.size() != static_cast<Eigen::Index>(vol.mlp().parameter_count()))
      out.mlp = VecX::Zero(vol.mlp().parameter_count());
    if (out.features.feature_dim == 0) out.features.feature_dim = vol.octree().feature_dim();
    mlp_sink = &out.mlp;
    feat_sink = &out.features;
    out.log_xi += result.xi * d_xi;  // xi = exp(log_xi)
  }
  FieldGradSinks sinks;
  sinks.mlp = mlp_sink;
  sinks.features = feat_sink;

  fb.backward(d_sdf.data(), nullptr, sem ? d_logits.data() : nullptr,
              sensor_pose ? PGradMode::likelihood_only : PGradMode::none, sinks);

  if (sensor_pose) {
    const Mat3 rt = sensor_pose->rotation().transpose();
    const Pose inv = sensor_pose->inverse();
    Vec3 d_omega = Vec3::Zero(), d_nu = Vec3::Zero();
    for (std::size_t i = 0; i < n; ++i) {
      if (!result.in_map[i]) continue;
      const Vec3 h = rt * fb.p_grad(static_cast<int>(i));
      const Vec3 q = inv * points[i];  // sample in sensor frame
      d_nu += h;
      d_omega += q.cross(h);
    }
    out.pose.head<3>() += d_omega;
    out.pose.tail<3>() += d_nu;
  }
}

}  // namespace sdfatlas
