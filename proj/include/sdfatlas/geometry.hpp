#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>
#include <optional>
#include <string>
#include <vector>

namespace sdfatlas {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Vec6 = Eigen::Matrix<double, 6, 1>;
using Mat6 = Eigen::Matrix<double, 6, 6>;

Mat3 skew(const Vec3& v);

// Axis-angle perturbation of SE(3): tangent = [omega; nu], omega in radians,
// nu in meters. exp follows T = (exp([omega]x), V(omega) nu).
struct Twist {
  Vec3 omega = Vec3::Zero();
  Vec3 nu = Vec3::Zero();

  Vec6 vector() const {
    Vec6 v;
    v << omega, nu;
    return v;
  }
  static Twist from_vector(const Vec6& v) { return Twist{v.head<3>(), v.tail<3>()}; }
};

// Rigid transform, stored as rotation matrix + translation. Maps points from
// the child frame into the parent frame (sensor-to-world convention).
class Pose {
 public:
  Pose() : rotation_(Mat3::Identity()), translation_(Vec3::Zero()) {}
  Pose(const Mat3& rotation, const Vec3& translation)
      : rotation_(rotation), translation_(translation) {}

  static Pose identity() { return Pose(); }
  static Pose from_quaternion(const Eigen::Quaterniond& q, const Vec3& t) {
    return Pose(q.normalized().toRotationMatrix(), t);
  }

  const Mat3& rotation() const { return rotation_; }
  const Vec3& translation() const { return translation_; }
  Eigen::Quaterniond quaternion() const { return Eigen::Quaterniond(rotation_); }

  Vec3 operator*(const Vec3& p) const { return rotation_ * p + translation_; }

  Pose operator*(const Pose& rhs) const {
    return Pose(rotation_ * rhs.rotation_, rotation_ * rhs.translation_ + translation_);
  }

  Pose inverse() const {
    Mat3 rt = rotation_.transpose();
    return Pose(rt, -(rt * translation_));
  }

  // Max deviation of R^T R from identity plus |det - 1|.
  double orthonormality_error() const;
  bool is_valid(double tol = 1e-9) const { return orthonormality_error() <= tol; }

  // Nearest rotation via quaternion round trip; used after file loads.
  Pose orthonormalized() const {
    return Pose(Eigen::Quaterniond(rotation_).normalized().toRotationMatrix(), translation_);
  }

  // Row-major 3x4 (KITTI odometry line layout).
  std::array<double, 12> flatten() const;
  static Pose from_flat(const std::array<double, 12>& m, bool reorthonormalize = true);

 private:
  Mat3 rotation_;
  Vec3 translation_;
};

inline Vec3 transform_point(const Pose& T, const Vec3& p) { return T * p; }
inline Pose compose(const Pose& a, const Pose& b) { return a * b; }

Mat3 so3_exp(const Vec3& omega);
// Requires rotation angle < pi; throws std::domain_error at the pi ambiguity.
Vec3 so3_log(const Mat3& R);
Mat3 so3_left_jacobian(const Vec3& omega);
Mat3 so3_left_jacobian_inv(const Vec3& omega);
Mat3 so3_right_jacobian(const Vec3& omega);
Mat3 so3_right_jacobian_inv(const Vec3& omega);

Pose exp_map(const Twist& xi);
Twist log_map(const Pose& T);

// Adjoint of T acting on [omega; nu] tangents.
Mat6 se3_adjoint(const Pose& T);
// d/d(dxi) of exp(xi (+) dxi) = exp(xi) exp(Jr(xi) dxi), [omega; nu] blocks.
Mat6 se3_right_jacobian(const Twist& xi);
Mat6 se3_right_jacobian_inv(const Twist& xi);

struct Ray {
  Vec3 origin = Vec3::Zero();
  Vec3 direction = Vec3::UnitX();

  Ray() = default;
  Ray(const Vec3& o, const Vec3& d) : origin(o), direction(d.normalized()) {}
  Vec3 at(double t) const { return origin + t * direction; }
};

inline Ray transform_ray(const Pose& T, const Ray& r) {
  return Ray(T * r.origin, T.rotation() * r.direction);
}

struct PointCloud {
  std::vector<Vec3> points;
  std::vector<uint32_t> labels;  // empty or same length as points
  std::optional<Pose> sensor_pose;

  std::size_t size() const { return points.size(); }
  bool has_labels() const { return !labels.empty(); }
  bool consistent() const { return labels.empty() || labels.size() == points.size(); }
};

// KITTI odometry text convention: 12 whitespace-separated numbers per line,
// row-major 3x4. Rotations are re-orthonormalized on load.
std::vector<Pose> load_poses_kitti(const std::string& path);
void save_poses_kitti(const std::string& path, const std::vector<Pose>& poses);

}  // namespace sdfatlas
