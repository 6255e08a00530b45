#pragma once

#include <optional>
#include <span>
#include <vector>

#include "sdfatlas/feature_octree.hpp"
#include "sdfatlas/geometry.hpp"
#include "sdfatlas/neural_field.hpp"

namespace sdfatlas {

struct SamplingConfig {
  int n_voxel_samples = 12;
  int n_surface_samples = 12;
  double max_range = 25.0;    // meters
  double min_range = 0.1;     // returns closer than this are dropped from ray pools
  double truncation = 0.3;    // tau
  double surface_band = 0.9;  // half-width of the band around the measured range
  double dedup_epsilon = 1e-6;

  double free_sdf() const { return 3.0 * truncation; }
  void validate() const;
};

struct RaySampleSet {
  Ray ray;                     // volume frame
  std::vector<double> depths;  // strictly increasing, in (0, max_range]
  double measured_range = 0.0;
  std::optional<uint32_t> measured_class;
  double free_sdf = 0.9;  // SDF substituted for samples outside the map
  bool valid = false;

  std::size_t size() const { return depths.size(); }
};

// Stratified voxel-guided samples over the allocated intervals along the ray
// (capped at measured_range + surface_band) merged with stratified
// surface-guided samples in [r - band, r + band]. Merged draws are sorted and
// deduplicated; a ray with fewer than two usable depths comes back invalid.
RaySampleSet sample_ray(const FeatureOctree& tree, const Ray& ray, double measured_range,
                        const SamplingConfig& cfg, uint64_t rng_seed);
RaySampleSet sample_ray(const NeuralVolume& vol, const Ray& ray, double measured_range,
                        const SamplingConfig& cfg, uint64_t rng_seed);

// Opacity/transmittance stack of the range approximation: alpha_n =
// max((Phi(s_n) - Phi(s_{n+1})) / Phi(s_n), 0) with Phi the sigmoid of
// temperature xi, T_n the cumulated transparency, and range = sum T a rho.
// The sample after the last is linearly extrapolated from the final pair.
struct RangeWeights {
  std::vector<double> phi;     // size n+1
  std::vector<double> alpha;   // size n
  std::vector<double> trans;   // size n, T_n
  std::vector<double> weight;  // size n, T_n * alpha_n
  double s_extrapolated = 0.0;
  double range = 0.0;
  double weight_sum = 0.0;
};

RangeWeights compute_range_weights(std::span<const double> sdf, std::span<const double> depth,
                                   double xi);

// Reverse pass of compute_range_weights. d_weight (optional) is an upstream on
// each T_n * alpha_n (used by semantic rendering); d_sdf is accumulated, d_xi
// likewise.
void backward_range_weights(const RangeWeights& rw, std::span<const double> sdf,
                            std::span<const double> depth, double xi, double d_range,
                            std::span<const double> d_weight, std::span<double> d_sdf,
                            double& d_xi);

struct RenderResult {
  RaySampleSet samples;
  std::vector<double> sdf;     // per sample, free_sdf where outside the map
  std::vector<uint8_t> in_map;
  RangeWeights weights;
  double range = 0.0;
  bool has_semantics = false;
  VecX class_scores;  // l(c)
  MatX sample_probs;  // C x n, zero columns for outside-map samples
  double xi = 0.0;
};

RenderResult render_range(const NeuralVolume& vol, const RaySampleSet& samples,
                          std::optional<double> xi_override = std::nullopt);
// Requires a semantic volume; scores share the weights of render_range.
VecX render_semantics(const NeuralVolume& vol, const RaySampleSet& samples,
                      std::optional<double> xi_override = std::nullopt);
RenderResult render_full(const NeuralVolume& vol, const RaySampleSet& samples, bool semantics,
                         std::optional<double> xi_override = std::nullopt);

struct RenderGrads {
  VecX mlp;                  // Mlp parameter layout
  FeatureGradSink features;
  double log_xi = 0.0;
  Vec6 pose = Vec6::Zero();  // d loss / d right-tangent of the sensor pose
};

// Reverse pass through weights, field, and sample positions. sensor_pose (the
// pose generating the ray, volume frame) enables the pose-tangent output;
// want_params may be false for frozen volumes (alignment).
void render_backward(const NeuralVolume& vol, const RenderResult& result, double d_range,
                     const VecX* d_class_scores, const Pose* sensor_pose, bool want_params,
                     RenderGrads& out);

}  // namespace sdfatlas
