#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <iosfwd>
#include <memory>
#include <span>
#include <vector>

#include "sdfatlas/feature_octree.hpp"
#include "sdfatlas/geometry.hpp"

namespace sdfatlas {

using MatX = Eigen::MatrixXd;
using VecX = Eigen::VectorXd;

// Sinusoidal position encoding applied element-wise:
// [cos(2^0 pi q), sin(2^0 pi q), ..., cos(2^{L-1} pi q), sin(2^{L-1} pi q)]
// optionally followed by q itself. Entry e depends only on axis e % 3.
struct EncodingConfig {
  int num_frequencies = 6;  // L
  bool include_raw = true;

  int dim() const { return 6 * num_frequencies + (include_raw ? 3 : 0); }
};

// out has dim() entries; d1/d2 (optional) receive the first/second derivative
// of entry e with respect to its own axis q[e % 3].
void encode(const Vec3& q, const EncodingConfig& cfg, double* out, double* d1 = nullptr,
            double* d2 = nullptr);

struct MlpConfig {
  int input_dim = 0;      // feature_dim + encoding dim
  int hidden = 128;       // trunk width, two layers
  int semantic_hidden = 64;
  int num_classes = 0;    // 0 = geometry only
  double sharpness = 100.0;  // softplus sharpness; C-inf so priors can differentiate grad s

  void validate() const;
};

// Two softplus trunk layers, a linear SDF head, and an optional softplus+linear
// semantic head off the trunk output. Parameters live in one flat vector
// (column-major matrices) so the optimizer and serialization see a stable
// ordering: W1 b1 W2 b2 w3 b3 [W4 b4 W5 b5].
class Mlp {
 public:
  Mlp() = default;
  Mlp(const MlpConfig& cfg, uint64_t seed);

  const MlpConfig& config() const { return cfg_; }
  std::size_t parameter_count() const { return params_.size(); }
  std::span<double> parameters() { return params_; }
  std::span<const double> parameters() const { return params_; }

  Eigen::Map<const MatX> w1() const { return map(o_w1_, cfg_.hidden, cfg_.input_dim); }
  Eigen::Map<const VecX> b1() const { return vmap(o_b1_, cfg_.hidden); }
  Eigen::Map<const MatX> w2() const { return map(o_w2_, cfg_.hidden, cfg_.hidden); }
  Eigen::Map<const VecX> b2() const { return vmap(o_b2_, cfg_.hidden); }
  Eigen::Map<const VecX> w3() const { return vmap(o_w3_, cfg_.hidden); }
  double b3() const { return params_[o_b3_]; }
  Eigen::Map<const MatX> w4() const { return map(o_w4_, cfg_.semantic_hidden, cfg_.hidden); }
  Eigen::Map<const VecX> b4() const { return vmap(o_b4_, cfg_.semantic_hidden); }
  Eigen::Map<const MatX> w5() const { return map(o_w5_, cfg_.num_classes, cfg_.semantic_hidden); }
  Eigen::Map<const VecX> b5() const { return vmap(o_b5_, cfg_.num_classes); }

  // Offsets into the flat parameter vector (also the gradient layout).
  std::size_t offset_w1() const { return o_w1_; }
  std::size_t offset_b1() const { return o_b1_; }
  std::size_t offset_w2() const { return o_w2_; }
  std::size_t offset_b2() const { return o_b2_; }
  std::size_t offset_w3() const { return o_w3_; }
  std::size_t offset_b3() const { return o_b3_; }
  std::size_t offset_w4() const { return o_w4_; }
  std::size_t offset_b4() const { return o_b4_; }
  std::size_t offset_w5() const { return o_w5_; }
  std::size_t offset_b5() const { return o_b5_; }

  void save(std::ostream& os) const;
  static Mlp load(std::istream& is, const MlpConfig& cfg);

 private:
  Eigen::Map<const MatX> map(std::size_t off, int r, int c) const {
    return Eigen::Map<const MatX>(params_.data() + off, r, c);
  }
  Eigen::Map<const VecX> vmap(std::size_t off, int r) const {
    return Eigen::Map<const VecX>(params_.data() + off, r);
  }
  void compute_offsets();

  MlpConfig cfg_;
  std::vector<double> params_;
  std::size_t o_w1_ = 0, o_b1_ = 0, o_w2_ = 0, o_b2_ = 0, o_w3_ = 0, o_b3_ = 0;
  std::size_t o_w4_ = 0, o_b4_ = 0, o_w5_ = 0, o_b5_ = 0;
};

struct FieldOutput {
  bool ok = false;
  int failed_level = -1;
  double sdf = 0.0;
  Vec3 sdf_gradient = Vec3::Zero();  // d sdf / d p, per meter
  VecX class_probs;                  // empty unless semantics requested
};

class FrozenVolumeError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// One submap: feature octree + MLP + anchor pose. Query points are in the
// volume's local frame; the anchor maps them into the world frame.
class NeuralVolume {
 public:
  NeuralVolume() = default;
  NeuralVolume(FeatureOctree octree, EncodingConfig enc, int num_classes, uint32_t id,
               const Pose& origin, uint64_t seed, double sharpness = 100.0);

  uint32_t id() const { return id_; }
  const Pose& origin() const { return origin_; }
  void set_origin(const Pose& p) { origin_ = p; }  // pose-graph updates only
  bool frozen() const { return frozen_; }
  void freeze() { frozen_ = true; }
  int num_classes() const { return mlp_.config().num_classes; }
  bool has_semantics() const { return num_classes() > 0; }

  const FeatureOctree& octree() const { return octree_; }
  FeatureOctree& octree_mut();
  const Mlp& mlp() const { return mlp_; }
  const EncodingConfig& encoding() const { return enc_; }

  double log_xi() const { return log_xi_; }
  double xi() const;
  void set_log_xi(double v);

  // Volume-local coordinates normalized to [-1, 1] over the octree bounds.
  Vec3 normalize_point(const Vec3& p) const;
  Vec3 normalize_scale() const;  // d(normalized)/dp, per axis

  FieldOutput query(const Vec3& p_local, bool need_gradient, bool need_semantics) const;

  // Flat parameter view: [octree features | mlp | log_xi].
  std::size_t parameter_count() const;
  double parameter(std::size_t i) const;
  void set_parameter(std::size_t i, double v);
  std::span<double> feature_params();
  std::span<double> mlp_params();
  std::size_t mlp_offset() const { return octree_.parameter_count(); }
  std::size_t log_xi_index() const { return parameter_count() - 1; }

  void save(std::ostream& os) const;
  static NeuralVolume load(std::istream& is);
  void save_file(const std::string& path) const;
  static NeuralVolume load_file(const std::string& path);

 private:
  void require_mutable() const;

  FeatureOctree octree_;
  Mlp mlp_;
  EncodingConfig enc_;
  Pose origin_;
  uint32_t id_ = 0;
  bool frozen_ = false;
  double log_xi_ = 0.0;
};

enum class PGradMode { none, likelihood_only, full };

// Accumulators a field backward pass writes into. The MLP gradient shares the
// Mlp parameter layout; feature gradients are sparse corner contributions.
struct FieldGradSinks {
  VecX* mlp = nullptr;              // null = parameter gradients not wanted
  FeatureGradSink* features = nullptr;
  bool want_params() const { return mlp != nullptr; }
};

struct FieldForwardOpts {
  bool gradient = false;      // compute sdf_gradient outputs
  bool semantics = false;     // compute class probabilities
  bool hessian_ctx = false;   // keep octree hessians (full p-gradients)
  bool point_grad_ctx = false;  // keep jacobian context for p-gradients only
};

// Batched field evaluation plus hand-derived reverse pass, including the
// second-order path through the SDF spatial gradient. One instance per worker;
// scratch is reused across calls.
class FieldBatch {
 public:
  explicit FieldBatch(const NeuralVolume& vol) : vol_(&vol) {}

  void forward(std::span<const Vec3> points, const FieldForwardOpts& opts);
  void forward(std::span<const Vec3> points, bool need_gradient, bool need_semantics,
               bool need_hessian_ctx = false) {
    forward(points, FieldForwardOpts{need_gradient, need_semantics, need_hessian_ctx, false});
  }

  int count() const { return count_; }
  bool ok(int i) const { return ok_[i] != 0; }
  int failed_level(int i) const { return failed_level_[i]; }
  double sdf(int i) const { return s_(i); }
  Vec3 sdf_gradient(int i) const { return gp_.col(i); }
  VecX class_probs(int i) const { return probs_.col(i); }
  const MatX& class_probs_matrix() const { return probs_; }

  // up_s: B; up_g: 3 x B (null if no gradient-consuming loss); up_logits:
  // C x B (null if none). Upstream columns of failed samples are ignored.
  // p-gradients are retrievable afterwards per pgrad_mode.
  void backward(const double* up_s, const double* up_g, const double* up_logits,
                PGradMode pgrad_mode, const FieldGradSinks& sinks);

  Vec3 p_grad(int i) const { return pgrad_.col(i); }

 private:
  const NeuralVolume* vol_;
  int count_ = 0;
  bool has_gradient_ = false, has_semantics_ = false, has_hessian_ = false;
  bool has_jac_ctx_ = false;

  std::vector<InterpResult> ctx_;
  std::vector<uint8_t> ok_;
  std::vector<int8_t> failed_level_;

  MatX x_, a1_, d1_, a2_, d2_;
  MatX t1_, q1_, q2_, gx_;
  MatX a4_, d4_, probs_;
  MatX ed1_, ed2_;
  VecX s_;
  MatX gp_;

  // backward scratch
  MatX v_, r1_, c1_, r2_;
  MatX z2a_, z2b_, z1a_, z1b_, z1tot_, xhat_, xhata_;
  MatX a1hat_, a2hat_;
  MatX pgrad_;
};

// Single-point reverse pass for tests and bindings: returns dense gradients
// aligned with the volume's flat parameter order (log_xi entry unused here)
// plus the gradient with respect to the query point.
struct QueryBackwardResult {
  VecX param_grad;
  Vec3 p_grad;
};
QueryBackwardResult query_backward(const NeuralVolume& vol, const Vec3& p_local,
                                   double up_sdf, const Vec3& up_gradient,
                                   const VecX& up_logits, PGradMode pmode = PGradMode::full);

}  // namespace sdfatlas
