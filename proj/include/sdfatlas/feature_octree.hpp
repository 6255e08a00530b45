#pragma once

#include <Eigen/Geometry>
#include <array>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "sdfatlas/geometry.hpp"
#include "sdfatlas/rng.hpp"

namespace sdfatlas {

inline constexpr int kMaxFeatureDim = 16;
inline constexpr int kMaxLevels = 6;

// Stack-only vectors/matrices for per-sample interpolation results.
using FeatVec = Eigen::Matrix<double, Eigen::Dynamic, 1, Eigen::ColMajor, kMaxFeatureDim, 1>;
using FeatMat3 =
    Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::ColMajor, kMaxFeatureDim, 3>;

struct OctreeConfig {
  double leaf_resolution = 0.088;  // cell size of the finest feature level, meters
  int num_levels = 3;              // K feature levels; level i cell = leaf * 2^i
  int feature_dim = 8;             // N
  Eigen::AlignedBox3d bounds;
  int dilation_voxels = 1;       // Chebyshev radius around observed points
  double ray_band_before = 0.9;  // allocate ray-traversed voxels this far before the endpoint
  double ray_band_behind = 0.3;  // and this far past it
  double init_scale = 1e-4;      // features start uniform in [-init_scale, init_scale]
  uint64_t init_seed = 0;

  double cell_size(int level) const { return leaf_resolution * static_cast<double>(1 << level); }
  void validate() const;
};

// Interpolation output plus the context needed to push gradients back.
struct InterpResult {
  bool ok = false;
  int failed_level = -1;
  FeatVec value;
  FeatMat3 jacobian;       // d value / d p, per meter
  FeatMat3 hessian_upper;  // columns (xy, xz, yz) of d2 value / dp2; diagonal is identically 0
  bool has_jacobian = false;
  bool has_hessian = false;

  int levels = 0;
  std::array<uint32_t, 8 * kMaxLevels> corners{};  // global corner indices
  std::array<double, 3 * kMaxLevels> local{};      // in-cell coordinates in [0,1)
  std::array<double, kMaxLevels> inv_cell{};

  Mat3 hessian_matrix(int dim) const {
    Mat3 h;
    const double a = hessian_upper(dim, 0), b = hessian_upper(dim, 1), c = hessian_upper(dim, 2);
    h << 0, a, b, a, 0, c, b, c, 0;
    return h;
  }
};

// Append-only sparse accumulator for feature gradients; merged into a dense
// gradient vector by a single reducer.
struct FeatureGradSink {
  int feature_dim = 0;
  std::vector<uint32_t> corner_index;
  std::vector<double> values;  // feature_dim entries per corner_index entry

  explicit FeatureGradSink(int dim = 0) : feature_dim(dim) {}
  void clear() {
    corner_index.clear();
    values.clear();
  }
  void add(uint32_t corner, const double* g) {
    corner_index.push_back(corner);
    values.insert(values.end(), g, g + feature_dim);
  }
  // dense has one entry per feature scalar (corner-major).
  void scatter_into(std::span<double> dense) const;
};

struct OctreeBuildStats {
  std::size_t skipped_points = 0;
  std::size_t input_points = 0;
  std::size_t allocated_leaves = 0;
};

// Sparse multi-level lattice of learnable feature vectors with tri-linear
// interpolation and its analytic first and second spatial derivatives. All
// levels share the finest-lattice alignment; a query is covered only when the
// containing cell at every level has its 8 corner features allocated.
class FeatureOctree {
 public:
  FeatureOctree() = default;

  // clouds carry sensor_pose mapping sensor frame -> volume frame.
  static FeatureOctree build_from_clouds(const std::vector<PointCloud>& clouds,
                                         const OctreeConfig& cfg,
                                         OctreeBuildStats* stats = nullptr);

  const OctreeConfig& config() const { return cfg_; }
  int feature_dim() const { return cfg_.feature_dim; }
  int num_levels() const { return cfg_.num_levels; }

  std::size_t corner_count() const { return corner_keys_.size(); }
  std::size_t parameter_count() const { return features_.size(); }
  std::span<double> features() { return features_; }
  std::span<const double> features() const { return features_; }

  bool covers(const Vec3& p, int* failed_level = nullptr) const;
  InterpResult interpolate(const Vec3& p, bool with_jacobian, bool with_hessian) const;

  // Accumulates d(loss)/d(features) into sink and optionally d(loss)/dp.
  // up_jacobian may be null when the loss does not consume the jacobian; the
  // p-gradient's second-order term then vanishes. Requires ctx.has_hessian
  // when both up_jacobian and p_grad are wanted.
  void backward_interpolate(const InterpResult& ctx, const FeatVec& up_value,
                            const FeatMat3* up_jacobian, FeatureGradSink& sink,
                            Vec3* p_grad) const;

  // Ordered (t_enter, t_exit) intervals of allocated leaf voxels hit by the
  // ray within [0, t_max]; empty when nothing is hit.
  std::vector<std::pair<double, double>> voxels_along(const Ray& ray, double t_max) const;

  bool leaf_allocated(const Eigen::Vector3i& voxel) const;
  std::vector<Eigen::Vector3i> allocated_leaves() const;  // sorted by (x, y, z)
  std::size_t allocated_leaf_count() const { return leaf_voxels_.size(); }
  // Tight box over allocated leaf voxels, in volume coordinates.
  Eigen::AlignedBox3d allocated_bounds() const;

  // Registry order: levels finest-to-coarsest, corners sorted by (x, y, z).
  // Global corner index = level_offset(level) + sorted position.
  std::size_t level_offset(int level) const { return level_offsets_[level]; }
  std::size_t level_corner_count(int level) const {
    return level_offsets_[level + 1] - level_offsets_[level];
  }
  Eigen::Vector3i corner_coords(uint32_t global_index) const;
  int corner_level(uint32_t global_index) const;
  Vec3 corner_position(uint32_t global_index) const;
  // Global corner index at (level, lattice coords), if allocated.
  std::optional<uint32_t> find_corner(int level, const Eigen::Vector3i& coords) const;

  void save(std::ostream& os) const;
  static FeatureOctree load(std::istream& is);

  bool structure_equals(const FeatureOctree& other) const;

 private:
  friend class OctreeBuilder;

  static uint64_t pack_key(const Eigen::Vector3i& v);
  static Eigen::Vector3i unpack_key(uint64_t k);

  struct Mix64Hash {
    std::size_t operator()(uint64_t k) const { return static_cast<std::size_t>(mix64(k)); }
  };
  using KeyMap = std::unordered_map<uint64_t, uint32_t, Mix64Hash>;
  using KeySet = std::unordered_set<uint64_t, Mix64Hash>;

  void finalize_from_leaves(const KeySet& leaves);
  bool gather_corners(const Vec3& p, int level, uint32_t* corner_out, double* local_out) const;

  OctreeConfig cfg_;
  std::vector<KeyMap> level_index_;           // per level: packed key -> global corner index
  std::vector<uint64_t> corner_keys_;         // registry order
  std::vector<std::size_t> level_offsets_;    // size K+1
  std::vector<double> features_;              // corner-major, feature_dim per corner
  KeySet leaf_voxels_;                        // derived: voxels with all 8 level-0 corners
};

}  // namespace sdfatlas
