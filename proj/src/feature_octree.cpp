#include "sdfatlas/feature_octree.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <limits>
#include <ostream>

#include "sdfatlas/binary_io.hpp"
#include "sdfatlas/errors.hpp"

namespace sdfatlas {

namespace {

constexpr int kKeyOffset = 1 << 20;
constexpr uint64_t kKeyMask = (1ull << 21) - 1;

inline int ifloor(double x) { return static_cast<int>(std::floor(x)); }

// Corner c = bx + 2*by + 4*bz.
constexpr int kCornerOffset[8][3] = {{0, 0, 0}, {1, 0, 0}, {0, 1, 0}, {1, 1, 0},
                                     {0, 0, 1}, {1, 0, 1}, {0, 1, 1}, {1, 1, 1}};

struct CellWeights {
  double w[8];
  double dw[3][8];   // d w / d local axis
  double d2w[3][8];  // rows: (xy, xz, yz)
};

void trilinear_weights(const double local[3], CellWeights& cw, bool with_first,
                       bool with_second) {
  const double x = local[0], y = local[1], z = local[2];
  const double mx = 1.0 - x, my = 1.0 - y, mz = 1.0 - z;
  cw.w[0] = mx * my * mz;
  cw.w[1] = x * my * mz;
  cw.w[2] = mx * y * mz;
  cw.w[3] = x * y * mz;
  cw.w[4] = mx * my * z;
  cw.w[5] = x * my * z;
  cw.w[6] = mx * y * z;
  cw.w[7] = x * y * z;
  if (with_first) {
    const double a = my * mz, b = y * mz, c = my * z, d = y * z;
    cw.dw[0][0] = -a; cw.dw[0][1] = a; cw.dw[0][2] = -b; cw.dw[0][3] = b;
    cw.dw[0][4] = -c; cw.dw[0][5] = c; cw.dw[0][6] = -d; cw.dw[0][7] = d;
    const double e = mx * mz, f = x * mz, g = mx * z, h = x * z;
    cw.dw[1][0] = -e; cw.dw[1][1] = -f; cw.dw[1][2] = e; cw.dw[1][3] = f;
    cw.dw[1][4] = -g; cw.dw[1][5] = -h; cw.dw[1][6] = g; cw.dw[1][7] = h;
    const double i = mx * my, j = x * my, k = mx * y, l = x * y;
    cw.dw[2][0] = -i; cw.dw[2][1] = -j; cw.dw[2][2] = -k; cw.dw[2][3] = -l;
    cw.dw[2][4] = i; cw.dw[2][5] = j; cw.dw[2][6] = k; cw.dw[2][7] = l;
  }
  if (with_second) {
    cw.d2w[0][0] = mz; cw.d2w[0][1] = -mz; cw.d2w[0][2] = -mz; cw.d2w[0][3] = mz;
    cw.d2w[0][4] = z; cw.d2w[0][5] = -z; cw.d2w[0][6] = -z; cw.d2w[0][7] = z;
    cw.d2w[1][0] = my; cw.d2w[1][1] = -my; cw.d2w[1][2] = y; cw.d2w[1][3] = -y;
    cw.d2w[1][4] = -my; cw.d2w[1][5] = my; cw.d2w[1][6] = -y; cw.d2w[1][7] = y;
    cw.d2w[2][0] = mx; cw.d2w[2][1] = x; cw.d2w[2][2] = -mx; cw.d2w[2][3] = -x;
    cw.d2w[2][4] = -mx; cw.d2w[2][5] = -x; cw.d2w[2][6] = mx; cw.d2w[2][7] = x;
  }
}

// Amanatides & Woo traversal over a uniform lattice; visits (voxel, t_enter,
// t_exit) for the segment [t0, t1] of origin + t*dir.
template <typename Visit>
void walk_lattice(const Vec3& origin, const Vec3& dir, double t0, double t1, double cell,
                  Visit&& visit) {
  if (!(t1 > t0)) return;
  const double inv_cell = 1.0 / cell;
  const Vec3 p0 = origin + t0 * dir;
  Eigen::Vector3i v(ifloor(p0.x() * inv_cell), ifloor(p0.y() * inv_cell),
                    ifloor(p0.z() * inv_cell));
  Eigen::Vector3i step = Eigen::Vector3i::Zero();
  Vec3 t_max, t_delta;
  constexpr double kInf = std::numeric_limits<double>::infinity();
  for (int a = 0; a < 3; ++a) {
    if (dir[a] > 1e-15) {
      step[a] = 1;
      t_delta[a] = cell / dir[a];
      t_max[a] = t0 + ((v[a] + 1) * cell - p0[a]) / dir[a];
    } else if (dir[a] < -1e-15) {
      step[a] = -1;
      t_delta[a] = -cell / dir[a];
      t_max[a] = t0 + (v[a] * cell - p0[a]) / dir[a];
    } else {
      t_max[a] = kInf;
      t_delta[a] = kInf;
    }
  }
  double t = t0;
  while (t < t1) {
    int axis = 0;
    if (t_max[1] < t_max[axis]) axis = 1;
    if (t_max[2] < t_max[axis]) axis = 2;
    const double t_exit = std::min(t_max[axis], t1);
    if (t_exit - t > 1e-12) visit(v, t, t_exit);
    if (t_max[axis] >= t1) break;
    t = t_max[axis];
    v[axis] += step[axis];
    t_max[axis] += t_delta[axis];
  }
}

// Segment of [t_lo, t_hi] inside an axis-aligned box, or empty.
bool clip_to_box(const Vec3& origin, const Vec3& dir, const Eigen::AlignedBox3d& box,
                 double& t_lo, double& t_hi) {
  for (int a = 0; a < 3; ++a) {
    if (std::abs(dir[a]) < 1e-15) {
      if (origin[a] < box.min()[a] || origin[a] > box.max()[a]) return false;
      continue;
    }
    double u = (box.min()[a] - origin[a]) / dir[a];
    double w = (box.max()[a] - origin[a]) / dir[a];
    if (u > w) std::swap(u, w);
    t_lo = std::max(t_lo, u);
    t_hi = std::min(t_hi, w);
    if (t_lo > t_hi) return false;
  }
  return true;
}

}  // namespace

void OctreeConfig::validate() const {
  if (!(leaf_resolution > 0)) throw ConfigError("octree: leaf_resolution must be positive");
  if (num_levels < 1 || num_levels > kMaxLevels)
    throw ConfigError("octree: num_levels out of range");
  if (feature_dim < 1 || feature_dim > kMaxFeatureDim)
    throw ConfigError("octree: feature_dim out of range");
  if (bounds.isEmpty() || (bounds.max() - bounds.min()).minCoeff() <= 0)
    throw ConfigError("octree: bounds are degenerate");
  if (dilation_voxels < 0) throw ConfigError("octree: dilation must be >= 0");
}

void FeatureGradSink::scatter_into(std::span<double> dense) const {
  const std::size_t n = corner_index.size();
  for (std::size_t i = 0; i < n; ++i) {
    double* dst = dense.data() + static_cast<std::size_t>(corner_index[i]) * feature_dim;
    const double* src = values.data() + i * feature_dim;
    for (int d = 0; d < feature_dim; ++d) dst[d] += src[d];
  }
}

uint64_t FeatureOctree::pack_key(const Eigen::Vector3i& v) {
  const uint64_t x = static_cast<uint64_t>(v.x() + kKeyOffset) & kKeyMask;
  const uint64_t y = static_cast<uint64_t>(v.y() + kKeyOffset) & kKeyMask;
  const uint64_t z = static_cast<uint64_t>(v.z() + kKeyOffset) & kKeyMask;
  return (x << 42) | (y << 21) | z;
}

Eigen::Vector3i FeatureOctree::unpack_key(uint64_t k) {
  return Eigen::Vector3i(static_cast<int>((k >> 42) & kKeyMask) - kKeyOffset,
                         static_cast<int>((k >> 21) & kKeyMask) - kKeyOffset,
                         static_cast<int>(k & kKeyMask) - kKeyOffset);
}

FeatureOctree FeatureOctree::build_from_clouds(const std::vector<PointCloud>& clouds,
                                               const OctreeConfig& cfg,
                                               OctreeBuildStats* stats) {
  cfg.validate();
  OctreeBuildStats local_stats;
  std::size_t total_points = 0;
  for (const auto& c : clouds) total_points += c.size();
  if (total_points == 0) throw DataError("octree build: no input points");
  local_stats.input_points = total_points;

  const double leaf = cfg.leaf_resolution;
  const double inv_leaf = 1.0 / leaf;
  KeySet leaves;
  leaves.reserve(total_points * 2);

  for (const auto& cloud : clouds) {
    const Pose pose = cloud.sensor_pose.value_or(Pose::identity());
    const Vec3 sensor_origin = pose.translation();
    for (const Vec3& q_sensor : cloud.points) {
      const Vec3 q = pose * q_sensor;
      if (!cfg.bounds.contains(q)) {
        ++local_stats.skipped_points;
        continue;
      }
      const Eigen::Vector3i base(ifloor(q.x() * inv_leaf), ifloor(q.y() * inv_leaf),
                                 ifloor(q.z() * inv_leaf));
      const int r = cfg.dilation_voxels;
      for (int dx = -r; dx <= r; ++dx)
        for (int dy = -r; dy <= r; ++dy)
          for (int dz = -r; dz <= r; ++dz)
            leaves.insert(pack_key(base + Eigen::Vector3i(dx, dy, dz)));

      const Vec3 delta = q - sensor_origin;
      const double range = delta.norm();
      if (range < 1e-9) continue;
      const Vec3 dir = delta / range;
      double t_lo = std::max(0.0, range - cfg.ray_band_before);
      double t_hi = range + cfg.ray_band_behind;
      if (!clip_to_box(sensor_origin, dir, cfg.bounds, t_lo, t_hi)) continue;
      walk_lattice(sensor_origin, dir, t_lo, t_hi, leaf,
                   [&](const Eigen::Vector3i& v, double, double) { leaves.insert(pack_key(v)); });
    }
  }

  if (leaves.empty()) throw DataError("octree build: no points inside bounds");
  local_stats.allocated_leaves = leaves.size();
  if (stats) *stats = local_stats;

  FeatureOctree tree;
  tree.cfg_ = cfg;
  tree.finalize_from_leaves(leaves);
  return tree;
}

void FeatureOctree::finalize_from_leaves(const KeySet& leaves) {
  const int levels = cfg_.num_levels;
  level_index_.assign(levels, KeyMap());
  corner_keys_.clear();
  level_offsets_.assign(levels + 1, 0);

  std::vector<std::vector<uint64_t>> level_keys(levels);
  for (int lv = 0; lv < levels; ++lv) {
    KeySet corners;
    corners.reserve(leaves.size() * 2);
    for (uint64_t leaf_key : leaves) {
      const Eigen::Vector3i v = unpack_key(leaf_key);
      const Eigen::Vector3i cell(v.x() >> lv, v.y() >> lv, v.z() >> lv);
      for (const auto& off : kCornerOffset)
        corners.insert(pack_key(cell + Eigen::Vector3i(off[0], off[1], off[2])));
    }
    level_keys[lv].assign(corners.begin(), corners.end());
    std::sort(level_keys[lv].begin(), level_keys[lv].end());
  }

  std::size_t offset = 0;
  for (int lv = 0; lv < levels; ++lv) {
    level_offsets_[lv] = offset;
    auto& index = level_index_[lv];
    index.reserve(level_keys[lv].size() * 2);
    for (uint64_t key : level_keys[lv]) {
      index.emplace(key, static_cast<uint32_t>(offset));
      corner_keys_.push_back(key);
      ++offset;
    }
  }
  level_offsets_[levels] = offset;

  features_.resize(offset * static_cast<std::size_t>(cfg_.feature_dim));
  Rng rng(derive_seed(cfg_.init_seed, 0x0c7ee5u));
  for (double& f : features_) f = rng.uniform(-cfg_.init_scale, cfg_.init_scale);

  leaf_voxels_.clear();
  leaf_voxels_.reserve(level_keys[0].size());
  const auto& lvl0 = level_index_[0];
  for (uint64_t key : level_keys[0]) {
    const Eigen::Vector3i v = unpack_key(key);
    bool all = true;
    for (int c = 1; c < 8 && all; ++c) {
      const Eigen::Vector3i corner =
          v + Eigen::Vector3i(kCornerOffset[c][0], kCornerOffset[c][1], kCornerOffset[c][2]);
      all = lvl0.count(pack_key(corner)) > 0;
    }
    if (all) leaf_voxels_.insert(key);
  }
}

bool FeatureOctree::gather_corners(const Vec3& p, int level, uint32_t* corner_out,
                                   double* local_out) const {
  const double inv_cell = 1.0 / cfg_.cell_size(level);
  Eigen::Vector3i cell;
  for (int a = 0; a < 3; ++a) {
    const double q = p[a] * inv_cell;
    const double f = std::floor(q);
    cell[a] = static_cast<int>(f);
    local_out[a] = q - f;
  }
  const auto& index = level_index_[level];
  for (int c = 0; c < 8; ++c) {
    const Eigen::Vector3i corner =
        cell + Eigen::Vector3i(kCornerOffset[c][0], kCornerOffset[c][1], kCornerOffset[c][2]);
    auto it = index.find(pack_key(corner));
    if (it == index.end()) return false;
    corner_out[c] = it->second;
  }
  return true;
}

bool FeatureOctree::covers(const Vec3& p, int* failed_level) const {
  uint32_t corners[8];
  double local[3];
  for (int lv = 0; lv < cfg_.num_levels; ++lv) {
    if (!gather_corners(p, lv, corners, local)) {
      if (failed_level) *failed_level = lv;
      return false;
    }
  }
  return true;
}

InterpResult FeatureOctree::interpolate(const Vec3& p, bool with_jacobian,
                                        bool with_hessian) const {
  const int n = cfg_.feature_dim;
  InterpResult res;
  res.levels = cfg_.num_levels;
  res.value.setZero(n);
  if (with_jacobian) res.jacobian.setZero(n, 3);
  if (with_hessian) res.hessian_upper.setZero(n, 3);
  res.has_jacobian = with_jacobian;
  res.has_hessian = with_hessian;

  for (int lv = 0; lv < cfg_.num_levels; ++lv) {
    uint32_t* corners = res.corners.data() + 8 * lv;
    double* local = res.local.data() + 3 * lv;
    if (!gather_corners(p, lv, corners, local)) {
      res.ok = false;
      res.failed_level = lv;
      return res;
    }
    const double inv_cell = 1.0 / cfg_.cell_size(lv);
    res.inv_cell[lv] = inv_cell;

    CellWeights cw;
    trilinear_weights(local, cw, with_jacobian, with_hessian);
    const double inv2 = inv_cell * inv_cell;
    for (int c = 0; c < 8; ++c) {
      const double* psi = features_.data() + static_cast<std::size_t>(corners[c]) * n;
      const double w = cw.w[c];
      for (int d = 0; d < n; ++d) res.value(d) += w * psi[d];
      if (with_jacobian) {
        const double gx = cw.dw[0][c] * inv_cell;
        const double gy = cw.dw[1][c] * inv_cell;
        const double gz = cw.dw[2][c] * inv_cell;
        for (int d = 0; d < n; ++d) {
          res.jacobian(d, 0) += gx * psi[d];
          res.jacobian(d, 1) += gy * psi[d];
          res.jacobian(d, 2) += gz * psi[d];
        }
      }
      if (with_hessian) {
        const double hxy = cw.d2w[0][c] * inv2;
        const double hxz = cw.d2w[1][c] * inv2;
        const double hyz = cw.d2w[2][c] * inv2;
        for (int d = 0; d < n; ++d) {
          res.hessian_upper(d, 0) += hxy * psi[d];
          res.hessian_upper(d, 1) += hxz * psi[d];
          res.hessian_upper(d, 2) += hyz * psi[d];
        }
      }
    }
  }
  res.ok = true;
  return res;
}

void FeatureOctree::backward_interpolate(const InterpResult& ctx, const FeatVec& up_value,
                                         const FeatMat3* up_jacobian, FeatureGradSink& sink,
                                         Vec3* p_grad) const {
  const int n = cfg_.feature_dim;
  double fg[kMaxFeatureDim];
  for (int lv = 0; lv < ctx.levels; ++lv) {
    const uint32_t* corners = ctx.corners.data() + 8 * lv;
    const double* local = ctx.local.data() + 3 * lv;
    const double inv_cell = ctx.inv_cell[lv];
    CellWeights cw;
    trilinear_weights(local, cw, up_jacobian != nullptr, false);
    for (int c = 0; c < 8; ++c) {
      const double w = cw.w[c];
      if (up_jacobian) {
        const double gx = cw.dw[0][c] * inv_cell;
        const double gy = cw.dw[1][c] * inv_cell;
        const double gz = cw.dw[2][c] * inv_cell;
        for (int d = 0; d < n; ++d)
          fg[d] = w * up_value(d) + gx * (*up_jacobian)(d, 0) + gy * (*up_jacobian)(d, 1) +
                  gz * (*up_jacobian)(d, 2);
      } else {
        for (int d = 0; d < n; ++d) fg[d] = w * up_value(d);
      }
      sink.add(corners[c], fg);
    }
  }
  if (p_grad) {
    Vec3 g = Vec3::Zero();
    if (ctx.has_jacobian) g += ctx.jacobian.transpose() * up_value;
    if (up_jacobian) {
      if (!ctx.has_hessian)
        throw std::logic_error("backward_interpolate: hessian context required");
      for (int d = 0; d < n; ++d) {
        const double a = ctx.hessian_upper(d, 0);  // xy
        const double b = ctx.hessian_upper(d, 1);  // xz
        const double c2 = ctx.hessian_upper(d, 2);  // yz
        const double ux = (*up_jacobian)(d, 0);
        const double uy = (*up_jacobian)(d, 1);
        const double uz = (*up_jacobian)(d, 2);
        g.x() += a * uy + b * uz;
        g.y() += a * ux + c2 * uz;
        g.z() += b * ux + c2 * uy;
      }
    }
    *p_grad += g;
  }
}

std::vector<std::pair<double, double>> FeatureOctree::voxels_along(const Ray& ray,
                                                                   double t_max) const {
  std::vector<std::pair<double, double>> intervals;
  double t_lo = 0.0, t_hi = t_max;
  Eigen::AlignedBox3d walk_box = cfg_.bounds;
  // Dilation can allocate slightly past the configured bounds.
  const double pad = cfg_.leaf_resolution * (cfg_.dilation_voxels + 1);
  walk_box.min() -= Vec3::Constant(pad);
  walk_box.max() += Vec3::Constant(pad);
  if (!clip_to_box(ray.origin, ray.direction, walk_box, t_lo, t_hi)) return intervals;
  walk_lattice(ray.origin, ray.direction, t_lo, t_hi, cfg_.leaf_resolution,
               [&](const Eigen::Vector3i& v, double t0, double t1) {
                 if (leaf_voxels_.count(pack_key(v))) intervals.emplace_back(t0, t1);
               });
  return intervals;
}

bool FeatureOctree::leaf_allocated(const Eigen::Vector3i& voxel) const {
  return leaf_voxels_.count(pack_key(voxel)) > 0;
}

std::vector<Eigen::Vector3i> FeatureOctree::allocated_leaves() const {
  std::vector<uint64_t> keys(leaf_voxels_.begin(), leaf_voxels_.end());
  std::sort(keys.begin(), keys.end());
  std::vector<Eigen::Vector3i> out;
  out.reserve(keys.size());
  for (uint64_t k : keys) out.push_back(unpack_key(k));
  return out;
}

Eigen::AlignedBox3d FeatureOctree::allocated_bounds() const {
  Eigen::AlignedBox3d box;
  for (uint64_t k : leaf_voxels_) {
    const Eigen::Vector3i v = unpack_key(k);
    box.extend(Vec3(v.x(), v.y(), v.z()) * cfg_.leaf_resolution);
    box.extend(Vec3(v.x() + 1, v.y() + 1, v.z() + 1) * cfg_.leaf_resolution);
  }
  return box;
}

Eigen::Vector3i FeatureOctree::corner_coords(uint32_t global_index) const {
  return unpack_key(corner_keys_.at(global_index));
}

int FeatureOctree::corner_level(uint32_t global_index) const {
  for (int lv = 0; lv < cfg_.num_levels; ++lv)
    if (global_index < level_offsets_[lv + 1]) return lv;
  throw std::out_of_range("corner index out of range");
}

Vec3 FeatureOctree::corner_position(uint32_t global_index) const {
  const int lv = corner_level(global_index);
  const Eigen::Vector3i c = corner_coords(global_index);
  return Vec3(c.x(), c.y(), c.z()) * cfg_.cell_size(lv);
}

std::optional<uint32_t> FeatureOctree::find_corner(int level,
                                                   const Eigen::Vector3i& coords) const {
  if (level < 0 || level >= cfg_.num_levels) return std::nullopt;
  auto it = level_index_[level].find(pack_key(coords));
  if (it == level_index_[level].end()) return std::nullopt;
  return it->second;
}

void FeatureOctree::save(std::ostream& os) const {
  write_magic(os, "NFOC");
  write_pod<uint32_t>(os, 1);
  write_pod<double>(os, cfg_.leaf_resolution);
  write_pod<uint32_t>(os, static_cast<uint32_t>(cfg_.num_levels));
  write_pod<uint32_t>(os, static_cast<uint32_t>(cfg_.feature_dim));
  for (int a = 0; a < 3; ++a) write_pod<double>(os, cfg_.bounds.min()[a]);
  for (int a = 0; a < 3; ++a) write_pod<double>(os, cfg_.bounds.max()[a]);
  write_pod<int32_t>(os, cfg_.dilation_voxels);
  write_pod<double>(os, cfg_.ray_band_before);
  write_pod<double>(os, cfg_.ray_band_behind);
  write_pod<double>(os, cfg_.init_scale);
  write_pod<uint64_t>(os, cfg_.init_seed);
  write_pod<uint32_t>(os, static_cast<uint32_t>(cfg_.num_levels));
  const int n = cfg_.feature_dim;
  for (int lv = 0; lv < cfg_.num_levels; ++lv) {
    const std::size_t begin = level_offsets_[lv], end = level_offsets_[lv + 1];
    write_pod<uint64_t>(os, end - begin);
    for (std::size_t i = begin; i < end; ++i) {
      const Eigen::Vector3i c = unpack_key(corner_keys_[i]);
      write_pod<int32_t>(os, c.x());
      write_pod<int32_t>(os, c.y());
      write_pod<int32_t>(os, c.z());
      const double* f = features_.data() + i * n;
      for (int d = 0; d < n; ++d) write_pod<float>(os, static_cast<float>(f[d]));
    }
  }
}

FeatureOctree FeatureOctree::load(std::istream& is) {
  expect_magic(is, "NFOC");
  const uint32_t version = read_pod<uint32_t>(is);
  if (version != 1) throw IoError("octree file: unsupported version");
  FeatureOctree tree;
  OctreeConfig cfg;
  cfg.leaf_resolution = read_pod<double>(is);
  cfg.num_levels = static_cast<int>(read_pod<uint32_t>(is));
  cfg.feature_dim = static_cast<int>(read_pod<uint32_t>(is));
  Vec3 lo, hi;
  for (int a = 0; a < 3; ++a) lo[a] = read_pod<double>(is);
  for (int a = 0; a < 3; ++a) hi[a] = read_pod<double>(is);
  cfg.bounds = Eigen::AlignedBox3d(lo, hi);
  cfg.dilation_voxels = read_pod<int32_t>(is);
  cfg.ray_band_before = read_pod<double>(is);
  cfg.ray_band_behind = read_pod<double>(is);
  cfg.init_scale = read_pod<double>(is);
  cfg.init_seed = read_pod<uint64_t>(is);
  cfg.validate();
  tree.cfg_ = cfg;
  const uint32_t level_count = read_pod<uint32_t>(is);
  if (level_count != static_cast<uint32_t>(cfg.num_levels))
    throw IoError("octree file: level count mismatch");

  const int n = cfg.feature_dim;
  tree.level_index_.assign(cfg.num_levels, KeyMap());
  tree.level_offsets_.assign(cfg.num_levels + 1, 0);
  std::size_t offset = 0;
  for (int lv = 0; lv < cfg.num_levels; ++lv) {
    tree.level_offsets_[lv] = offset;
    const uint64_t count = read_pod<uint64_t>(is);
    auto& index = tree.level_index_[lv];
    index.reserve(count * 2);
    tree.features_.resize((offset + count) * n);
    for (uint64_t i = 0; i < count; ++i) {
      Eigen::Vector3i c;
      c.x() = read_pod<int32_t>(is);
      c.y() = read_pod<int32_t>(is);
      c.z() = read_pod<int32_t>(is);
      const uint64_t key = pack_key(c);
      index.emplace(key, static_cast<uint32_t>(offset));
      tree.corner_keys_.push_back(key);
      double* f = tree.features_.data() + offset * n;
      for (int d = 0; d < n; ++d) f[d] = static_cast<double>(read_pod<float>(is));
      ++offset;
    }
  }
  tree.level_offsets_[cfg.num_levels] = offset;

  // Rebuild the derived leaf-voxel set from level-0 corners.
  const auto& lvl0 = tree.level_index_[0];
  for (std::size_t i = tree.level_offsets_[0]; i < tree.level_offsets_[1]; ++i) {
    const Eigen::Vector3i v = unpack_key(tree.corner_keys_[i]);
    bool all = true;
    for (int c = 1; c < 8 && all; ++c) {
      const Eigen::Vector3i corner =
          v + Eigen::Vector3i(kCornerOffset[c][0], kCornerOffset[c][1], kCornerOffset[c][2]);
      all = lvl0.count(pack_key(corner)) > 0;
    }
    if (all) tree.leaf_voxels_.insert(tree.corner_keys_[i]);
  }
  return tree;
}

bool FeatureOctree::structure_equals(const FeatureOctree& other) const {
  return cfg_.leaf_resolution == other.cfg_.leaf_resolution &&
         cfg_.num_levels == other.cfg_.num_levels &&
         cfg_.feature_dim == other.cfg_.feature_dim && corner_keys_ == other.corner_keys_ &&
         level_offsets_ == other.level_offsets_;
}

}  // namespace sdfatlas
