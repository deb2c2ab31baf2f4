#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Geometry>
#include <Eigen/SVD>

namespace omnivo {

using Vec3 = Eigen::Vector3d;
using Vec6 = Eigen::Matrix<double, 6, 1>;
using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;
using Mat6 = Eigen::Matrix<double, 6, 6>;

inline Mat3 hat(const Vec3& w) {
  Mat3 m;
  m << 0, -w.z(), w.y(), w.z(), 0, -w.x(), -w.y(), w.x(), 0;
  return m;
}

inline Eigen::Quaterniond so3_exp(const Vec3& w) {
  const double theta2 = w.squaredNorm();
  const double theta = std::sqrt(theta2);
  double real, imag_factor;
  if (theta < 1e-8) {
    real = 1.0 - theta2 / 8.0;
    imag_factor = 0.5 - theta2 / 48.0;
  } else {
    real = std::cos(0.5 * theta);
    imag_factor = std::sin(0.5 * theta) / theta;
  }
  Eigen::Quaterniond q(real, imag_factor * w.x(), imag_factor * w.y(), imag_factor * w.z());
  return q.normalized();
}

inline Vec3 so3_log(Eigen::Quaterniond q) {
  q.normalize();
  if (q.w() < 0) q.coeffs() = -q.coeffs();
  const double n = q.vec().norm();
  if (n < 1e-10) {
    const double w2 = q.w() * q.w();
    return (2.0 / q.w() - 2.0 * n * n / (3.0 * w2 * q.w())) * q.vec();
  }
  return (2.0 * std::atan2(n, q.w()) / n) * q.vec();
}

// Rigid transform x -> R x + t. Rotation stored as a unit quaternion.
// Tangent vectors are ordered (translation v, rotation w).
class SE3 {
 public:
  SE3() : q_(Eigen::Quaterniond::Identity()), t_(Vec3::Zero()) {}
  // Quaternions that are already unit to round-off are kept bit for bit so
  // text round trips are exact.
  SE3(const Eigen::Quaterniond& q, const Vec3& t)
      : q_(std::abs(q.squaredNorm() - 1.0) < 1e-15 ? q : q.normalized()), t_(t) {}
  SE3(const Mat3& R, const Vec3& t) : q_(Eigen::Quaterniond(R).normalized()), t_(t) {}

  static SE3 identity() { return SE3(); }

  static SE3 exp(const Vec6& xi) {
    const Vec3 v = xi.head<3>();
    const Vec3 w = xi.tail<3>();
    const double theta2 = w.squaredNorm();
    const double theta = std::sqrt(theta2);
    const Mat3 W = hat(w);
    Mat3 V;
    if (theta < 1e-5) {
      V = Mat3::Identity() + 0.5 * W + W * W / 6.0;
    } else {
      V = Mat3::Identity() + (1 - std::cos(theta)) / theta2 * W + (theta - std::sin(theta)) / (theta2 * theta) * W * W;
    }
    return SE3(so3_exp(w), V * v);
  }

  Vec6 log() const {
    const Vec3 w = so3_log(q_);
    const double theta2 = w.squaredNorm();
    const double theta = std::sqrt(theta2);
    const Mat3 W = hat(w);
    Mat3 Vinv;
    if (theta < 1e-5) {
      Vinv = Mat3::Identity() - 0.5 * W + W * W / 12.0;
    } else {
      const double half = 0.5 * theta;
      Vinv = Mat3::Identity() - 0.5 * W + (1.0 - half * std::cos(half) / std::sin(half)) / theta2 * W * W;
    }
    Vec6 out;
    out.head<3>() = Vinv * t_;
    out.tail<3>() = w;
    return out;
  }

  const Eigen::Quaterniond& unit_quaternion() const { return q_; }
  Mat3 rotation() const { return q_.toRotationMatrix(); }
  const Vec3& translation() const { return t_; }
  Vec3& translation() { return t_; }

  Mat4 matrix() const {
    Mat4 m = Mat4::Identity();
    m.topLeftCorner<3, 3>() = rotation();
    m.topRightCorner<3, 1>() = t_;
    return m;
  }

  SE3 inverse() const {
    const Eigen::Quaterniond qi = q_.conjugate();
    return SE3(qi, -(qi * t_));
  }

  SE3 operator*(const SE3& o) const { return SE3(q_ * o.q_, q_ * o.t_ + t_); }
  Vec3 operator*(const Vec3& x) const { return q_ * x + t_; }

  // Adjoint for (v, w) ordering.
  Mat6 adjoint() const {
    const Mat3 R = rotation();
    Mat6 A = Mat6::Zero();
    A.topLeftCorner<3, 3>() = R;
    A.topRightCorner<3, 3>() = hat(t_) * R;
    A.bottomRightCorner<3, 3>() = R;
    return A;
  }

 private:
  Eigen::Quaterniond q_;
  Vec3 t_;
};

// Transform taking points in frame i to frame j when both poses map world
// points into their camera frames: T_j * T_i^-1.
inline SE3 relative_pose(const SE3& T_i, const SE3& T_j) { return T_j * T_i.inverse(); }

// Similarity x -> s R x + t.
class Sim3 {
 public:
  Sim3() = default;
  Sim3(const SE3& rigid, double scale) : rigid_(rigid), scale_(scale) {
    if (!(scale > 0)) throw std::invalid_argument("Sim3 scale must be positive");
  }

  double scale() const { return scale_; }
  Mat3 rotation() const { return rigid_.rotation(); }
  const Vec3& translation() const { return rigid_.translation(); }
  const SE3& rigid() const { return rigid_; }

  Vec3 operator*(const Vec3& x) const { return scale_ * (rigid_.unit_quaternion() * x) + rigid_.translation(); }

  Sim3 operator*(const Sim3& o) const {
    const Vec3 t = scale_ * (rigid_.unit_quaternion() * o.translation()) + translation();
    return Sim3(SE3(rigid_.unit_quaternion() * o.rigid_.unit_quaternion(), t), scale_ * o.scale_);
  }

  Sim3 inverse() const {
    const Eigen::Quaterniond qi = rigid_.unit_quaternion().conjugate();
    return Sim3(SE3(qi, -(qi * translation()) / scale_), 1.0 / scale_);
  }

  // Apply to a camera-to-world pose: rotate, scale the position.
  SE3 apply(const SE3& cam_to_world) const {
    return SE3(rigid_.unit_quaternion() * cam_to_world.unit_quaternion(), (*this) * cam_to_world.translation());
  }

 private:
  SE3 rigid_;
  double scale_ = 1.0;
};

// ---------------------------------------------------------------------------
// Trajectories. Poses are camera-to-world, as in the TUM format.

struct StampedPose {
  double timestamp = 0;
  SE3 pose;
};

class TrajectoryError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class Trajectory {
 public:
  Trajectory() = default;

  void push_back(double timestamp, const SE3& pose) {
    if (!poses_.empty() && !(timestamp > poses_.back().timestamp))
      throw TrajectoryError("trajectory timestamps must be strictly increasing");
    poses_.push_back({timestamp, pose});
  }

  std::size_t size() const { return poses_.size(); }
  bool empty() const { return poses_.empty(); }
  const StampedPose& operator[](std::size_t i) const { return poses_[i]; }
  auto begin() const { return poses_.begin(); }
  auto end() const { return poses_.end(); }

  // Sum of distances between consecutive positions.
  double length() const {
    double len = 0;
    for (std::size_t i = 1; i < poses_.size(); ++i)
      len += (poses_[i].pose.translation() - poses_[i - 1].pose.translation()).norm();
    return len;
  }

 private:
  std::vector<StampedPose> poses_;
};

// `timestamp tx ty tz qx qy qz qw`, `#` comments ignored.
inline Trajectory read_tum(std::istream& in, const std::string& name = "trajectory") {
  Trajectory traj;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    std::istringstream ss(line);
    double v[8];
    int n = 0;
    while (n < 8 && ss >> v[n]) ++n;
    if (n == 0 && ss.eof()) continue;
    std::string extra;
    if (n != 8 || (ss >> extra))
      throw TrajectoryError(name + ":" + std::to_string(lineno) + ": expected `timestamp tx ty tz qx qy qz qw`");
    Eigen::Quaterniond q(v[7], v[4], v[5], v[6]);
    if (q.norm() < 1e-6) throw TrajectoryError(name + ":" + std::to_string(lineno) + ": zero quaternion");
    try {
      traj.push_back(v[0], SE3(q, Vec3(v[1], v[2], v[3])));
    } catch (const TrajectoryError& e) {
      throw TrajectoryError(name + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return traj;
}

inline Trajectory read_tum(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw TrajectoryError("cannot open " + path.string());
  return read_tum(in, path.string());
}

inline void write_tum(std::ostream& out, const Trajectory& traj) {
  out << std::setprecision(17);
  for (const auto& sp : traj) {
    const auto& q = sp.pose.unit_quaternion();
    const auto& t = sp.pose.translation();
    out << sp.timestamp << " " << t.x() << " " << t.y() << " " << t.z() << " " << q.x() << " " << q.y() << " "
        << q.z() << " " << q.w() << "\n";
  }
}

inline void write_tum(const std::filesystem::path& path, const Trajectory& traj) {
  std::ofstream out(path);
  if (!out) throw TrajectoryError("cannot write " + path.string());
  write_tum(out, traj);
}

// ---------------------------------------------------------------------------
// Similarity alignment and translational RMSE.

inline constexpr double kAssociationWindow = 0.02;  // seconds

class AlignmentError : public std::runtime_error {
 public:
  enum class Reason { kTooFewAssociations, kDegenerate };
  AlignmentError(Reason r, const std::string& msg) : std::runtime_error(msg), reason_(r) {}
  Reason reason() const { return reason_; }

 private:
  Reason reason_;
};

struct Association {
  std::size_t est_index;
  std::size_t gt_index;
};

// Nearest-timestamp association within `window` seconds.
inline std::vector<Association> associate(const Trajectory& est, const Trajectory& gt,
                                          double window = kAssociationWindow) {
  std::vector<Association> out;
  if (gt.empty()) return out;
  std::size_t j = 0;
  for (std::size_t i = 0; i < est.size(); ++i) {
    const double t = est[i].timestamp;
    while (j + 1 < gt.size() && std::abs(gt[j + 1].timestamp - t) <= std::abs(gt[j].timestamp - t)) ++j;
    if (std::abs(gt[j].timestamp - t) <= window) out.push_back({i, j});
  }
  return out;
}

struct AlignmentResult {
  Sim3 transform;  // maps estimated positions onto ground truth
  double rmse = 0;
  std::size_t matches = 0;
  std::vector<double> errors;
};

// Closed-form least-squares similarity between associated positions
// (Umeyama), followed by the translational RMSE.
inline AlignmentResult sim3_align(const Trajectory& est, const Trajectory& gt, double window = kAssociationWindow) {
  const auto assoc = associate(est, gt, window);
  if (assoc.size() < 3)
    throw AlignmentError(AlignmentError::Reason::kTooFewAssociations,
                         "alignment needs at least 3 associated poses, got " + std::to_string(assoc.size()));
  Eigen::Matrix3Xd src(3, assoc.size()), dst(3, assoc.size());
  for (std::size_t k = 0; k < assoc.size(); ++k) {
    src.col(static_cast<Eigen::Index>(k)) = est[assoc[k].est_index].pose.translation();
    dst.col(static_cast<Eigen::Index>(k)) = gt[assoc[k].gt_index].pose.translation();
  }
  auto collinear = [](const Eigen::Matrix3Xd& pts) {
    const Eigen::Matrix3Xd c = pts.colwise() - pts.rowwise().mean();
    Eigen::JacobiSVD<Eigen::Matrix3d> svd(c * c.transpose());
    const auto s = svd.singularValues();
    return !(s[0] > 0) || s[1] <= 1e-12 * s[0];
  };
  if (collinear(src) || collinear(dst))
    throw AlignmentError(AlignmentError::Reason::kDegenerate, "alignment is degenerate: positions are collinear");

  const Mat4 T = Eigen::umeyama(src, dst, true);
  const Mat3 sR = T.topLeftCorner<3, 3>();
  const double s = std::cbrt(sR.determinant());
  AlignmentResult res;
  res.transform = Sim3(SE3(Mat3(sR / s), Vec3(T.topRightCorner<3, 1>())), s);
  res.matches = assoc.size();
  double sum = 0;
  for (Eigen::Index k = 0; k < src.cols(); ++k) {
    const double e = (res.transform * Vec3(src.col(k)) - dst.col(k)).norm();
    res.errors.push_back(e);
    sum += e * e;
  }
  res.rmse = std::sqrt(sum / static_cast<double>(src.cols()));
  return res;
}

}  // namespace omnivo
