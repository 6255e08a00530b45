#include "sdfatlas/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <memory>
#include <sstream>

#include "sdfatlas/binary_io.hpp"
#include "sdfatlas/errors.hpp"
#include "sdfatlas/parallel.hpp"
#include "sdfatlas/rng.hpp"

namespace sdfatlas {

void TrainConfig::validate() const {
  if (iterations < 0) throw ConfigError("train: iterations must be >= 0");
  if (rays_per_batch < 1) throw ConfigError("train: rays_per_batch must be positive");
  if (!(lr_features > 0) || !(lr_mlp > 0) || !(lr_pose > 0) || !(lr_xi > 0))
    throw ConfigError("train: learning rates must be positive");
}

namespace {

struct PoolEntry {
  uint32_t frame;
  uint32_t point;
};

struct PreparedRay {
  uint32_t frame = 0;
  Vec3 dir_sensor = Vec3::UnitX();
  double measured_range = 0;
  int cls = -1;
  double free_sdf = 0.9;
  bool valid = false;
  std::vector<double> depths;
  std::vector<uint8_t> near_surface;
  std::vector<Vec3> smooth_delta;  // volume frame, zero unless near-surface
};

struct PreparedBatch {
  std::vector<PreparedRay> rays;
  int valid_rays = 0;
  int semantic_rays = 0;
};

std::vector<PoolEntry> build_ray_pool(const std::vector<Frame>& frames,
                                      const SamplingConfig& sampling) {
  std::vector<PoolEntry> pool;
  for (uint32_t f = 0; f < frames.size(); ++f) {
    const PointCloud& c = frames[f].cloud;
    if (!c.consistent()) throw DataError("frame cloud labels inconsistent with points");
    for (uint32_t p = 0; p < c.points.size(); ++p) {
      const double r = c.points[p].norm();
      if (r >= sampling.min_range && r <= sampling.max_range) pool.push_back({f, p});
    }
  }
  if (pool.empty()) throw DataError("train: no usable rays in the given frames");
  return pool;
}

std::vector<Pose> effective_poses(const std::vector<Frame>& frames,
                                  const std::vector<Vec6>& xi) {
  std::vector<Pose> eff(frames.size());
  for (std::size_t i = 0; i < frames.size(); ++i)
    eff[i] = frames[i].pose * exp_map(Twist::from_vector(xi[i]));
  return eff;
}

PreparedBatch prepare_batch(const NeuralVolume& vol, const std::vector<Frame>& frames,
                            const std::vector<Pose>& eff, const std::vector<PoolEntry>& pool,
                            const LossWeights& weights, const SamplingConfig& sampling,
                            const TrainConfig& cfg, uint64_t iter) {
  PreparedBatch batch;
  batch.rays.resize(cfg.rays_per_batch);
  const bool semantics = weights.lambda_semantic > 0 && vol.has_semantics();
  const bool smooth = weights.lambda_smooth > 0;

  Rng pick(derive_seed(cfg.seed, iter, 0xba7c4));
  std::vector<std::size_t> chosen(cfg.rays_per_batch);
  for (int i = 0; i < cfg.rays_per_batch; ++i) chosen[i] = pick.uniform_index(pool.size());

  for (int i = 0; i < cfg.rays_per_batch; ++i) {
    const PoolEntry& pe = pool[chosen[i]];
    PreparedRay& ray = batch.rays[i];
    ray.frame = pe.frame;
    const PointCloud& cloud = frames[pe.frame].cloud;
    const Vec3 pt = cloud.points[pe.point];
    const double r = pt.norm();
    ray.measured_range = r;
    ray.dir_sensor = pt / r;
    ray.free_sdf = sampling.free_sdf();
    if (semantics && cloud.has_labels()) {
      ray.cls = static_cast<int>(cloud.labels[pe.point]);
      if (ray.cls >= vol.num_classes())
        throw DataError("semantic class id " + std::to_string(ray.cls) +
                        " out of range for " + std::to_string(vol.num_classes()) + " classes");
    }

    const Ray vray(eff[pe.frame].translation(), eff[pe.frame].rotation() * ray.dir_sensor);
    RaySampleSet ss = sample_ray(vol.octree(), vray, r, sampling,
                                 derive_seed(cfg.seed, iter, chosen[i], 1));
    ray.valid = ss.valid;
    if (!ss.valid) continue;
    ray.depths = std::move(ss.depths);
    const std::size_t n = ray.depths.size();
    ray.near_surface.assign(n, 0);
    if (smooth) ray.smooth_delta.assign(n, Vec3::Zero());
    Rng delta_rng(derive_seed(cfg.seed, iter, chosen[i], 2));
    for (std::size_t j = 0; j < n; ++j) {
      if (std::abs(r - ray.depths[j]) <= weights.tau) {
        ray.near_surface[j] = 1;
        if (smooth) {
          Vec3 d(delta_rng.normal(), delta_rng.normal(), delta_rng.normal());
          const double nrm = d.norm();
          if (nrm < 1e-12) d = Vec3::UnitX();
          else d /= nrm;
          ray.smooth_delta[j] = d * weights.smooth_delta;
        }
      }
    }
    ++batch.valid_rays;
    if (ray.cls >= 0) ++batch.semantic_rays;
  }
  return batch;
}

struct WorkerState {
  std::unique_ptr<FieldBatch> fb_main, fb_smooth;
  VecX mlp_grad;
  FeatureGradSink feat_sink;
  double xi_grad = 0;  // d loss / d xi (chained to log_xi by the reducer)
  std::vector<Vec6> pose_delta_grad;
  double sum_range = 0, sum_sdf = 0, sum_sem = 0, sum_eik = 0, sum_smooth = 0;
};

struct EvalGradRequest {
  bool want = false;
  bool pose = false;
};

// Shared forward (+ optional backward) over one prepared batch. Loss terms
// come back weighted by their lambdas and batch-averaged so the total is the
// objective value.
IterationStats evaluate_batch(const NeuralVolume& vol, const std::vector<Frame>& frames,
                              const std::vector<Pose>& eff, const PreparedBatch& batch,
                              const LossWeights& weights, const TrainConfig& cfg,
                              const EvalGradRequest& req, std::vector<WorkerState>* workers) {
  const bool priors = weights.lambda_eikonal > 0 || weights.lambda_smooth > 0;
  const bool smooth_on = weights.lambda_smooth > 0;
  const double xi = vol.xi();
  const int n_classes = vol.num_classes();
  const int r_valid = std::max(batch.valid_rays, 1);
  const int r_sem = std::max(batch.semantic_rays, 1);
  const bool sem_on = weights.lambda_semantic > 0 && vol.has_semantics();

  const int thread_count = cfg.threads > 0 ? cfg.threads : hardware_threads();
  const int n_workers =
      static_cast<int>(std::min<std::size_t>(thread_count, batch.rays.size()));
  std::vector<WorkerState> local_workers;
  std::vector<WorkerState>& ws = workers ? *workers : local_workers;
  if (static_cast<int>(ws.size()) < n_workers) ws.resize(n_workers);
  for (int w = 0; w < n_workers; ++w) {
    WorkerState& s = ws[w];
    if (!s.fb_main) s.fb_main = std::make_unique<FieldBatch>(vol);
    if (!s.fb_smooth) s.fb_smooth = std::make_unique<FieldBatch>(vol);
    if (req.want) {
      if (s.mlp_grad.size() != static_cast<Eigen::Index>(vol.mlp().parameter_count()))
        s.mlp_grad = VecX::Zero(vol.mlp().parameter_count());
      else
        s.mlp_grad.setZero();
      s.feat_sink.feature_dim = vol.octree().feature_dim();
      s.feat_sink.clear();
      s.xi_grad = 0;
      s.pose_delta_grad.assign(frames.size(), Vec6::Zero());
    }
    s.sum_range = s.sum_sdf = s.sum_sem = s.sum_eik = s.sum_smooth = 0;
  }

  constexpr int kChunkRays = 128;

  parallel_chunks(batch.rays.size(), n_workers, [&](int w, std::size_t begin, std::size_t end) {
    WorkerState& st = ws[w];
    FieldBatch& fb = *st.fb_main;
    FieldBatch& fbs = *st.fb_smooth;

    std::vector<Vec3> pts, spts;
    std::vector<int> ray_of, offset;   // per chunk ray bookkeeping
    std::vector<int> smooth_src;       // smooth batch index -> main sample index
    std::vector<double> up_s;
    std::vector<double> up_g, up_g2;   // 3 x B column-major
    std::vector<double> up_logits;

    for (std::size_t cbegin = begin; cbegin < end; cbegin += kChunkRays) {
      const std::size_t cend = std::min(end, cbegin + kChunkRays);
      pts.clear();
      ray_of.clear();
      offset.clear();
      smooth_src.clear();
      spts.clear();

      for (std::size_t rix = cbegin; rix < cend; ++rix) {
        const PreparedRay& ray = batch.rays[rix];
        offset.push_back(static_cast<int>(pts.size()));
        if (!ray.valid) continue;
        const Pose& T = eff[ray.frame];
        const Vec3 o = T.translation();
        const Vec3 d = T.rotation() * ray.dir_sensor;
        for (double rho : ray.depths) {
          pts.push_back(o + rho * d);
          ray_of.push_back(static_cast<int>(rix));
        }
      }
      offset.push_back(static_cast<int>(pts.size()));
      const int nb = static_cast<int>(pts.size());
      if (nb == 0) continue;

      FieldForwardOpts main_opts;
      main_opts.gradient = priors;
      main_opts.semantics = sem_on;
      main_opts.point_grad_ctx = req.pose;
      fb.forward(pts, main_opts);

      // Smoothness companion batch at p + delta for usable near-surface samples.
      if (smooth_on) {
        int k = 0;
        for (std::size_t rix = cbegin; rix < cend; ++rix) {
          const PreparedRay& ray = batch.rays[rix];
          if (!ray.valid) continue;
          const int base = offset[rix - cbegin];
          for (std::size_t j = 0; j < ray.depths.size(); ++j, ++k) {
            if (ray.near_surface[j] && fb.ok(base + static_cast<int>(j))) {
              spts.push_back(pts[base + j] + ray.smooth_delta[j]);
              smooth_src.push_back(base + static_cast<int>(j));
            }
          }
        }
        (void)k;
        if (!spts.empty()) fbs.forward(spts, FieldForwardOpts{true, false, false, false});
      }

      if (req.want) {
        up_s.assign(nb, 0.0);
        if (priors) up_g.assign(3 * nb, 0.0);
        if (sem_on) up_logits.assign(static_cast<std::size_t>(n_classes) * nb, 0.0);
        if (smooth_on) up_g2.assign(3 * spts.size(), 0.0);
      }

      // Per-ray losses and upstream assembly.
      std::vector<double> sdf_vals, d_sdf;
      std::vector<int> smooth_of_sample(smooth_on ? nb : 0, -1);
      for (std::size_t si = 0; si < smooth_src.size(); ++si)
        smooth_of_sample[smooth_src[si]] = static_cast<int>(si);

      for (std::size_t rix = cbegin; rix < cend; ++rix) {
        const PreparedRay& ray = batch.rays[rix];
        if (!ray.valid) continue;
        const int base = offset[rix - cbegin];
        const int n = static_cast<int>(ray.depths.size());
        sdf_vals.resize(n);
        int in_map = 0;
        for (int j = 0; j < n; ++j) {
          const bool ok = fb.ok(base + j);
          sdf_vals[j] = ok ? fb.sdf(base + j) : ray.free_sdf;
          if (ok) ++in_map;
        }
        const RangeWeights rw = compute_range_weights(sdf_vals, ray.depths, xi);

        // Range likelihood.
        const double lr_term = range_loss(ray.measured_range, rw.range, weights.sigma_range);
        st.sum_range += weights.lambda_range * lr_term / r_valid;

        // Semantic likelihood.
        VecX scores, d_scores;
        const bool ray_sem = sem_on && ray.cls >= 0;
        if (ray_sem) {
          scores = VecX::Zero(n_classes);
          for (int j = 0; j < n; ++j)
            if (fb.ok(base + j)) scores += rw.weight[j] * fb.class_probs(base + j);
          st.sum_sem +=
              weights.lambda_semantic * semantic_loss(scores, ray.cls) / r_sem;
          if (req.want)
            d_scores = (weights.lambda_semantic / r_sem) *
                       semantic_loss_grad(scores, ray.cls);
        }

        // Per-sample SDF likelihood and priors, averaged within the ray.
        double ray_sdf_loss = 0, ray_eik = 0, ray_smooth = 0;
        int smooth_pairs = 0;
        for (int j = 0; j < n; ++j) {
          if (!fb.ok(base + j)) continue;
          const double b = ray.measured_range - ray.depths[j];
          ray_sdf_loss += sdf_loss(b, sdf_vals[j], weights.tau, weights.sdf_bandwidth,
                                   weights.beta);
          if (weights.lambda_eikonal > 0)
            ray_eik += eikonal_loss(fb.sdf_gradient(base + j), weights.sigma_eikonal);
          if (smooth_on && smooth_of_sample[base + j] >= 0) {
            const int si = smooth_of_sample[base + j];
            if (fbs.ok(si)) {
              ray_smooth += smoothness_loss(fb.sdf_gradient(base + j), fbs.sdf_gradient(si),
                                            weights.sigma_smooth);
              ++smooth_pairs;
            }
          }
        }
        if (in_map > 0) {
          st.sum_sdf += weights.lambda_sdf * ray_sdf_loss / (in_map * r_valid);
          st.sum_eik += weights.lambda_eikonal * ray_eik / (in_map * r_valid);
        }
        if (smooth_pairs > 0)
          st.sum_smooth += weights.lambda_smooth * ray_smooth / (smooth_pairs * r_valid);

        if (!req.want) continue;

        // Upstreams: range (+ semantic weight path) through the weight stack,
        // direct SDF loss on samples, priors on gradients.
        d_sdf.assign(n, 0.0);
        std::vector<double> d_weight;
        if (ray_sem) {
          d_weight.assign(n, 0.0);
          for (int j = 0; j < n; ++j) {
            if (!fb.ok(base + j)) continue;
            const VecX probs = fb.class_probs(base + j);
            d_weight[j] = probs.dot(d_scores);
            // through the per-sample softmax into logits
            const VecX up = rw.weight[j] * d_scores;
            const VecX dlog = probs.cwiseProduct(up - VecX::Constant(n_classes, probs.dot(up)));
            for (int c = 0; c < n_classes; ++c)
              up_logits[static_cast<std::size_t>(base + j) * n_classes + c] += dlog(c);
          }
        }
        const double d_range = (weights.lambda_range / r_valid) *
                               range_loss_grad(ray.measured_range, rw.range, weights.sigma_range);
        double d_xi_ray = 0;
        backward_range_weights(rw, sdf_vals, ray.depths, xi, d_range, d_weight, d_sdf,
                               d_xi_ray);
        st.xi_grad += d_xi_ray;

        for (int j = 0; j < n; ++j) {
          if (!fb.ok(base + j)) continue;
          double us = d_sdf[j];
          if (in_map > 0) {
            const double b = ray.measured_range - ray.depths[j];
            us += (weights.lambda_sdf / (in_map * r_valid)) *
                  sdf_loss_grad(b, sdf_vals[j], weights.tau, weights.sdf_bandwidth,
                                weights.beta);
          }
          up_s[base + j] += us;
          if (weights.lambda_eikonal > 0 && in_map > 0) {
            const Vec3 ge = (weights.lambda_eikonal / (in_map * r_valid)) *
                            eikonal_loss_grad(fb.sdf_gradient(base + j), weights.sigma_eikonal);
            up_g[(base + j) * 3 + 0] += ge.x();
            up_g[(base + j) * 3 + 1] += ge.y();
            up_g[(base + j) * 3 + 2] += ge.z();
          }
          if (smooth_on && smooth_pairs > 0 && smooth_of_sample[base + j] >= 0) {
            const int si = smooth_of_sample[base + j];
            if (fbs.ok(si)) {
              auto [ga, gb] = smoothness_loss_grad(fb.sdf_gradient(base + j),
                                                   fbs.sdf_gradient(si), weights.sigma_smooth);
              const double scale = weights.lambda_smooth / (smooth_pairs * r_valid);
              for (int a = 0; a < 3; ++a) {
                up_g[(base + j) * 3 + a] += scale * ga[a];
                up_g2[si * 3 + a] += scale * gb[a];
              }
            }
          }
        }
      }

      if (!req.want) continue;

      FieldGradSinks sinks;
      sinks.mlp = &st.mlp_grad;
      sinks.features = &st.feat_sink;
      fb.backward(up_s.data(), priors ? up_g.data() : nullptr,
                  sem_on ? up_logits.data() : nullptr,
                  req.pose ? PGradMode::likelihood_only : PGradMode::none, sinks);
      if (smooth_on && !spts.empty())
        fbs.backward(nullptr, up_g2.data(), nullptr, PGradMode::none, sinks);

      if (req.pose) {
        for (std::size_t rix = cbegin; rix < cend; ++rix) {
          const PreparedRay& ray = batch.rays[rix];
          if (!ray.valid || frames[ray.frame].pose_fixed) continue;
          const int base = offset[rix - cbegin];
          const Mat3 rt = eff[ray.frame].rotation().transpose();
          Vec3 d_omega = Vec3::Zero(), d_nu = Vec3::Zero();
          for (std::size_t j = 0; j < ray.depths.size(); ++j) {
            if (!fb.ok(base + static_cast<int>(j))) continue;
            const Vec3 h = rt * fb.p_grad(base + static_cast<int>(j));
            const Vec3 q = ray.depths[j] * ray.dir_sensor;  // sensor-frame sample
            d_nu += h;
            d_omega += q.cross(h);
          }
          st.pose_delta_grad[ray.frame].head<3>() += d_omega;
          st.pose_delta_grad[ray.frame].tail<3>() += d_nu;
        }
      }
    }
  });

  IterationStats stats;
  for (int w = 0; w < n_workers; ++w) {
    stats.range += ws[w].sum_range;
    stats.sdf += ws[w].sum_sdf;
    stats.semantic += ws[w].sum_sem;
    stats.eikonal += ws[w].sum_eik;
    stats.smooth += ws[w].sum_smooth;
  }
  stats.total = stats.range + stats.sdf + stats.semantic + stats.eikonal + stats.smooth;
  return stats;
}

std::string stats_breakdown(const IterationStats& s) {
  std::ostringstream os;
  os << "L_r=" << s.range << " L_s=" << s.sdf << " L_c=" << s.semantic << " L_e=" << s.eikonal
     << " L_h=" << s.smooth;
  return os.str();
}

}  // namespace

void TrainReport::save_csv(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write train report: " + path);
  out << "iteration,L_r,L_s,L_c,L_e,L_h,total\n";
  out.precision(10);
  for (const auto& s : history)
    out << s.iteration << ',' << s.range << ',' << s.sdf << ',' << s.semantic << ','
        << s.eikonal << ',' << s.smooth << ',' << s.total << '\n';
}

TrainReport train_volume(NeuralVolume& vol, std::vector<Frame>& frames,
                         const LossWeights& weights, const SamplingConfig& sampling,
                         const TrainConfig& cfg) {
  weights.validate();
  sampling.validate();
  cfg.validate();
  if (vol.frozen()) throw FrozenVolumeError("train_volume: volume is frozen");
  if (frames.empty()) throw DataError("train_volume: no frames");

  const auto t_start = std::chrono::steady_clock::now();
  const auto pool = build_ray_pool(frames, sampling);

  std::vector<Vec6> xi_corr(frames.size(), Vec6::Zero());
  std::vector<uint8_t> frame_free(frames.size(), 0);
  bool any_free = false;
  if (cfg.pose_refinement) {
    for (std::size_t i = 0; i < frames.size(); ++i) {
      frame_free[i] = frames[i].pose_fixed ? 0 : 1;
      any_free = any_free || frame_free[i];
    }
  }

  Adam adam_feat(vol.octree().parameter_count(), cfg.adam);
  Adam adam_mlp(vol.mlp().parameter_count(), cfg.adam);
  Adam adam_xi(1, cfg.adam);
  Adam adam_pose(6 * frames.size(), cfg.adam);

  std::vector<double> feat_grad(vol.octree().parameter_count(), 0.0);
  VecX mlp_grad = VecX::Zero(vol.mlp().parameter_count());
  std::vector<double> pose_params(6 * frames.size(), 0.0);
  std::vector<double> pose_grad(6 * frames.size(), 0.0);

  std::vector<WorkerState> workers;
  TrainReport report;
  report.history.reserve(cfg.iterations);

  const bool all_zero = weights.lambda_range == 0 && weights.lambda_sdf == 0 &&
                        weights.lambda_semantic == 0 && weights.lambda_eikonal == 0 &&
                        weights.lambda_smooth == 0;

  for (int iter = 0; iter < cfg.iterations; ++iter) {
    const auto eff = effective_poses(frames, xi_corr);
    const PreparedBatch batch =
        prepare_batch(vol, frames, eff, pool, weights, sampling, cfg, iter);

    EvalGradRequest req;
    req.want = !all_zero;
    req.pose = any_free;
    IterationStats stats =
        evaluate_batch(vol, frames, eff, batch, weights, cfg, req, &workers);
    stats.iteration = iter;
    if (!std::isfinite(stats.total))
      throw NumericalError("train_volume: non-finite loss at iteration " +
                           std::to_string(iter) + " (" + stats_breakdown(stats) + ")");
    report.history.push_back(stats);
    if (all_zero) continue;

    // Deterministic reduction in worker order.
    std::fill(feat_grad.begin(), feat_grad.end(), 0.0);
    mlp_grad.setZero();
    double xi_grad = 0;
    std::fill(pose_grad.begin(), pose_grad.end(), 0.0);
    for (auto& w : workers) {
      if (!w.fb_main) continue;
      w.feat_sink.scatter_into(feat_grad);
      if (w.mlp_grad.size() == mlp_grad.size()) mlp_grad += w.mlp_grad;
      xi_grad += w.xi_grad;
      if (any_free)
        for (std::size_t f = 0; f < frames.size(); ++f)
          if (frame_free[f])
            Eigen::Map<Vec6>(pose_grad.data() + 6 * f) += w.pose_delta_grad[f];
    }

    adam_feat.step(vol.feature_params(), feat_grad, cfg.lr_features);
    adam_mlp.step(vol.mlp_params(), std::span<const double>(mlp_grad.data(), mlp_grad.size()),
                  cfg.lr_mlp);
    const double log_xi_grad = vol.xi() * xi_grad;
    double log_xi_val = vol.log_xi();
    adam_xi.step(std::span<double>(&log_xi_val, 1), std::span<const double>(&log_xi_grad, 1),
                 cfg.lr_xi);
    vol.set_log_xi(log_xi_val);

    if (any_free) {
      // Chain the right-perturbation gradient through exp(xi).
      for (std::size_t f = 0; f < frames.size(); ++f) {
        if (!frame_free[f]) continue;
        const Twist t = Twist::from_vector(Eigen::Map<Vec6>(pose_params.data() + 6 * f));
        const Vec6 delta = Eigen::Map<Vec6>(pose_grad.data() + 6 * f);
        Eigen::Map<Vec6>(pose_grad.data() + 6 * f) = se3_right_jacobian(t).transpose() * delta;
      }
      adam_pose.step(pose_params, pose_grad, cfg.lr_pose);
      for (std::size_t f = 0; f < frames.size(); ++f)
        if (frame_free[f]) xi_corr[f] = Eigen::Map<Vec6>(pose_params.data() + 6 * f);
    }
  }

  if (!report.history.empty()) report.final_stats = report.history.back();
  report.pose_corrections = xi_corr;
  for (std::size_t f = 0; f < frames.size(); ++f)
    if (frame_free[f]) frames[f].pose = frames[f].pose * exp_map(Twist::from_vector(xi_corr[f]));
  report.wall_time_sec =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
  return report;
}

ObjectiveGradient evaluate_objective_gradient(const NeuralVolume& vol,
                                              const std::vector<Frame>& frames,
                                              const LossWeights& weights,
                                              const SamplingConfig& sampling,
                                              const TrainConfig& cfg) {
  weights.validate();
  sampling.validate();
  const auto pool = build_ray_pool(frames, sampling);
  std::vector<Vec6> xi_corr(frames.size(), Vec6::Zero());
  const auto eff = effective_poses(frames, xi_corr);
  const PreparedBatch batch = prepare_batch(vol, frames, eff, pool, weights, sampling, cfg, 0);

  bool any_free = false;
  if (cfg.pose_refinement)
    for (const auto& f : frames) any_free = any_free || !f.pose_fixed;

  std::vector<WorkerState> workers;
  EvalGradRequest req;
  req.want = true;
  req.pose = any_free;
  ObjectiveGradient out;
  out.stats = evaluate_batch(vol, frames, eff, batch, weights, cfg, req, &workers);
  out.params = VecX::Zero(vol.parameter_count());
  out.pose.assign(frames.size(), Vec6::Zero());
  std::span<double> feat_span(out.params.data(), vol.octree().parameter_count());
  double xi_grad = 0;
  for (auto& w : workers) {
    if (!w.fb_main) continue;
    w.feat_sink.scatter_into(feat_span);
    if (w.mlp_grad.size() > 0)
      out.params.segment(vol.mlp_offset(), vol.mlp().parameter_count()) += w.mlp_grad;
    xi_grad += w.xi_grad;
    for (std::size_t f = 0; f < frames.size(); ++f) out.pose[f] += w.pose_delta_grad[f];
  }
  out.params(vol.log_xi_index()) = vol.xi() * xi_grad;
  return out;
}

GradientCheckResult total_gradient_check(NeuralVolume& vol, const std::vector<Frame>& frames,
                                         const LossWeights& weights,
                                         const SamplingConfig& sampling, const TrainConfig& cfg,
                                         int num_params, double fd_step) {
  weights.validate();
  sampling.validate();
  if (vol.frozen()) throw FrozenVolumeError("total_gradient_check: volume is frozen");

  const auto pool = build_ray_pool(frames, sampling);
  std::vector<Vec6> xi_corr(frames.size(), Vec6::Zero());
  const auto eff = effective_poses(frames, xi_corr);
  const PreparedBatch batch =
      prepare_batch(vol, frames, eff, pool, weights, sampling, cfg, 0);

  const bool priors = weights.lambda_eikonal > 0 || weights.lambda_smooth > 0;
  bool any_free = false;
  if (cfg.pose_refinement && !priors)
    for (const auto& f : frames) any_free = any_free || !f.pose_fixed;

  // Analytic pass.
  std::vector<WorkerState> workers;
  EvalGradRequest req;
  req.want = true;
  req.pose = any_free;
  evaluate_batch(vol, frames, eff, batch, weights, cfg, req, &workers);

  std::vector<double> feat_grad(vol.octree().parameter_count(), 0.0);
  VecX mlp_grad = VecX::Zero(vol.mlp().parameter_count());
  double xi_grad = 0;
  std::vector<Vec6> pose_grad(frames.size(), Vec6::Zero());
  std::vector<uint32_t> touched;
  for (auto& w : workers) {
    if (!w.fb_main) continue;
    w.feat_sink.scatter_into(feat_grad);
    touched.insert(touched.end(), w.feat_sink.corner_index.begin(),
                   w.feat_sink.corner_index.end());
    if (w.mlp_grad.size() == mlp_grad.size()) mlp_grad += w.mlp_grad;
    xi_grad += w.xi_grad;
    for (std::size_t f = 0; f < frames.size(); ++f) pose_grad[f] += w.pose_delta_grad[f];
  }
  std::sort(touched.begin(), touched.end());
  touched.erase(std::unique(touched.begin(), touched.end()), touched.end());

  const int nf = vol.octree().feature_dim();
  const std::size_t mlp_off = vol.mlp_offset();
  const std::size_t xi_index = vol.log_xi_index();

  // Candidate flat indices: volume params then 6 per frame for pose tangents.
  struct Candidate {
    std::size_t index;
    bool is_pose;
    std::size_t frame;
    int coord;
  };
  std::vector<Candidate> picks;
  Rng rng(derive_seed(cfg.seed, 0xfdc4ec));
  const int n_feat_picks = touched.empty() ? 0 : num_params / 2;
  for (int i = 0; i < n_feat_picks; ++i) {
    const uint32_t corner = touched[rng.uniform_index(touched.size())];
    const std::size_t idx =
        static_cast<std::size_t>(corner) * nf + rng.uniform_index(nf);
    picks.push_back({idx, false, 0, 0});
  }
  const int n_mlp_picks = std::max(1, num_params - n_feat_picks - 1);
  for (int i = 0; i < n_mlp_picks; ++i)
    picks.push_back({mlp_off + rng.uniform_index(vol.mlp().parameter_count()), false, 0, 0});
  picks.push_back({xi_index, false, 0, 0});
  if (any_free) {
    for (std::size_t f = 0; f < frames.size(); ++f) {
      if (frames[f].pose_fixed) continue;
      for (int c = 0; c < 6; ++c) picks.push_back({0, true, f, c});
    }
  }

  auto objective = [&](const std::vector<Vec6>& xi) {
    const auto e = effective_poses(frames, xi);
    return evaluate_batch(vol, frames, e, batch, weights, cfg, EvalGradRequest{}, nullptr)
        .total;
  };

  // Central differences of an objective of magnitude L resolve gradients only
  // down to ~eps*L/h; gradients below that are compared against a floor so
  // rounding noise cannot fail the check.
  const double base_value = std::abs(objective(xi_corr));
  const double rel_floor =
      std::max(1e-6, 1e5 * 2.2e-16 * std::max(1.0, base_value) / fd_step);

  GradientCheckResult out;
  for (const Candidate& c : picks) {
    double analytic;
    auto eval_pm = [&](double h) {
      double fplus, fminus;
      if (c.is_pose) {
        std::vector<Vec6> xi = xi_corr;
        xi[c.frame][c.coord] = h;
        fplus = objective(xi);
        xi[c.frame][c.coord] = -h;
        fminus = objective(xi);
      } else {
        const double old = vol.parameter(c.index);
        vol.set_parameter(c.index, old + h);
        fplus = objective(xi_corr);
        vol.set_parameter(c.index, old - h);
        fminus = objective(xi_corr);
        vol.set_parameter(c.index, old);
      }
      return (fplus - fminus) / (2.0 * h);
    };
    if (c.is_pose) {
      // At xi = 0 the right jacobian is the identity.
      analytic = pose_grad[c.frame][c.coord];
    } else if (c.index == xi_index) {
      analytic = vol.xi() * xi_grad;
    } else if (c.index >= mlp_off) {
      analytic = mlp_grad(static_cast<Eigen::Index>(c.index - mlp_off));
    } else {
      analytic = feat_grad[c.index];
    }

    const double fd1 = eval_pm(fd_step);
    const double fd2 = eval_pm(fd_step * 0.5);
    // Objective kinks (clamped opacities, |.| in the SDF loss) break the FD
    // oracle; two disagreeing step sizes flag them.
    const double fd_consistency = std::abs(fd1 - fd2);
    if (fd_consistency > 1e-2 * std::max({std::abs(fd1), std::abs(fd2), 1e-4})) {
      ++out.skipped_nonsmooth;
      continue;
    }
    const double denom = std::max({std::abs(analytic), std::abs(fd2), rel_floor});
    const double rel = std::abs(analytic - fd2) / denom;
    if (rel > out.max_rel_error) {
      out.max_rel_error = rel;
      out.worst_analytic = analytic;
      out.worst_fd = fd2;
      if (c.is_pose)
        out.worst_kind = "pose";
      else if (c.index == xi_index)
        out.worst_kind = "xi";
      else if (c.index >= mlp_off)
        out.worst_kind = "mlp";
      else
        out.worst_kind = "feature";
    }
    ++out.checked;
  }
  return out;
}

}  // namespace sdfatlas
