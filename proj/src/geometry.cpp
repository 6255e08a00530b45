#include "sdfatlas/geometry.hpp"

#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "sdfatlas/errors.hpp"

namespace sdfatlas {

namespace {
constexpr double kSmallAngle = 1e-9;
}

Mat3 skew(const Vec3& v) {
  Mat3 s;
  s << 0, -v.z(), v.y(), v.z(), 0, -v.x(), -v.y(), v.x(), 0;
  return s;
}

double Pose::orthonormality_error() const {
  double e = (rotation_.transpose() * rotation_ - Mat3::Identity()).cwiseAbs().maxCoeff();
  return std::max(e, std::abs(rotation_.determinant() - 1.0));
}

std::array<double, 12> Pose::flatten() const {
  std::array<double, 12> m;
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) m[r * 4 + c] = rotation_(r, c);
    m[r * 4 + 3] = translation_(r);
  }
  return m;
}

Pose Pose::from_flat(const std::array<double, 12>& m, bool reorthonormalize) {
  Mat3 R;
  Vec3 t;
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) R(r, c) = m[r * 4 + c];
    t(r) = m[r * 4 + 3];
  }
  Pose p(R, t);
  return reorthonormalize ? p.orthonormalized() : p;
}

Mat3 so3_exp(const Vec3& omega) {
  const double theta = omega.norm();
  if (theta < kSmallAngle) {
    Mat3 w = skew(omega);
    return Mat3::Identity() + w + 0.5 * w * w;
  }
  const Mat3 w = skew(omega / theta);
  return Mat3::Identity() + std::sin(theta) * w + (1.0 - std::cos(theta)) * w * w;
}

Vec3 so3_log(const Mat3& R) {
  const double tr = std::clamp((R.trace() - 1.0) / 2.0, -1.0, 1.0);
  const double theta = std::acos(tr);
  Vec3 axis_raw(R(2, 1) - R(1, 2), R(0, 2) - R(2, 0), R(1, 0) - R(0, 1));
  if (theta < kSmallAngle) return 0.5 * axis_raw;
  if (M_PI - theta < 1e-7)
    throw std::domain_error("so3_log: rotation angle at pi is ambiguous");
  return axis_raw * (theta / (2.0 * std::sin(theta)));
}

Mat3 so3_left_jacobian(const Vec3& omega) {
  const double theta = omega.norm();
  const Mat3 w = skew(omega);
  if (theta < kSmallAngle) return Mat3::Identity() + 0.5 * w + w * w / 6.0;
  const double t2 = theta * theta;
  const double a = (1.0 - std::cos(theta)) / t2;
  const double b = (theta - std::sin(theta)) / (t2 * theta);
  return Mat3::Identity() + a * w + b * w * w;
}

Mat3 so3_left_jacobian_inv(const Vec3& omega) {
  const double theta = omega.norm();
  const Mat3 w = skew(omega);
  if (theta < kSmallAngle) return Mat3::Identity() - 0.5 * w + w * w / 12.0;
  const double half = 0.5 * theta;
  const double cot_half = std::cos(half) / std::sin(half);
  const double c = (1.0 - half * cot_half) / (theta * theta);
  return Mat3::Identity() - 0.5 * w + c * w * w;
}

Mat3 so3_right_jacobian(const Vec3& omega) { return so3_left_jacobian(-omega); }
Mat3 so3_right_jacobian_inv(const Vec3& omega) { return so3_left_jacobian_inv(-omega); }

Pose exp_map(const Twist& xi) {
  return Pose(so3_exp(xi.omega), so3_left_jacobian(xi.omega) * xi.nu);
}

Twist log_map(const Pose& T) {
  Twist xi;
  xi.omega = so3_log(T.rotation());
  xi.nu = so3_left_jacobian_inv(xi.omega) * T.translation();
  return xi;
}

Mat6 se3_adjoint(const Pose& T) {
  Mat6 ad = Mat6::Zero();
  ad.topLeftCorner<3, 3>() = T.rotation();
  ad.bottomRightCorner<3, 3>() = T.rotation();
  ad.bottomLeftCorner<3, 3>() = skew(T.translation()) * T.rotation();
  return ad;
}

namespace {

Mat6 se3_ad(const Twist& xi) {
  Mat6 ad = Mat6::Zero();
  const Mat3 wx = skew(xi.omega);
  ad.topLeftCorner<3, 3>() = wx;
  ad.bottomRightCorner<3, 3>() = wx;
  ad.bottomLeftCorner<3, 3>() = skew(xi.nu);
  return ad;
}

// Left Jacobian by its series sum_{n>=0} ad^n / (n+1)!. Converges to machine
// precision for the small tangents used here (pose corrections, pose-graph
// residuals); guarded against the large-magnitude regime where the series
// would lose precision.
Mat6 se3_left_jacobian_series(const Twist& xi) {
  const double magnitude = xi.omega.norm() + xi.nu.norm();
  if (magnitude > 6.0)
    throw std::domain_error("se3 jacobian: tangent too large for series evaluation");
  const Mat6 ad = se3_ad(xi);
  Mat6 result = Mat6::Identity();
  Mat6 term = Mat6::Identity();
  for (int n = 1; n <= 60; ++n) {
    term = (term * ad) / static_cast<double>(n + 1);
    result += term;
    if (term.cwiseAbs().maxCoeff() < 1e-18) break;
  }
  return result;
}

}  // namespace

Mat6 se3_right_jacobian(const Twist& xi) {
  return se3_left_jacobian_series(Twist{-xi.omega, -xi.nu});
}

Mat6 se3_right_jacobian_inv(const Twist& xi) {
  Mat6 jr = se3_right_jacobian(xi);
  return jr.inverse();
}

std::vector<Pose> load_poses_kitti(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open pose file: " + path);
  std::vector<Pose> poses;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::array<double, 12> m;
    for (double& v : m) {
      if (!(ss >> v)) throw DataError("malformed pose line in " + path);
    }
    poses.push_back(Pose::from_flat(m));
  }
  return poses;
}

void save_poses_kitti(const std::string& path, const std::vector<Pose>& poses) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write pose file: " + path);
  out.precision(17);
  for (const Pose& p : poses) {
    auto m = p.flatten();
    for (int i = 0; i < 12; ++i) out << m[i] << (i == 11 ? '\n' : ' ');
  }
}

}  // namespace sdfatlas
