#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "omnivo/image.hpp"

namespace omnivo {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Vec5 = Eigen::Matrix<double, 5, 1>;
using Mat23 = Eigen::Matrix<double, 2, 3>;
using Mat25 = Eigen::Matrix<double, 2, 5>;
using Mat35 = Eigen::Matrix<double, 3, 5>;
using Mat32 = Eigen::Matrix<double, 3, 2>;

// Smallest admissible projection denominator z + |x| xi.
inline constexpr double kMinProjectionDenominator = 1e-8;

struct PinholeParams {
  double fx = 1, fy = 1, cx = 0, cy = 0;
};

// Unified omnidirectional model: project onto the unit sphere, then through a
// centre shifted by -xi along z. xi = 0 is the pinhole model.
struct UnifiedOmniParams {
  double fx = 1, fy = 1, cx = 0, cy = 0, xi = 0;

  static UnifiedOmniParams from_pinhole(const PinholeParams& p) { return {p.fx, p.fy, p.cx, p.cy, 0.0}; }

  Vec5 to_vector() const { return Vec5(fx, fy, cx, cy, xi); }
  static UnifiedOmniParams from_vector(const Vec5& v) { return {v[0], v[1], v[2], v[3], v[4]}; }

  // Parameters for pyramid level `level` (pixel centres at integer coords).
  UnifiedOmniParams at_level(int level) const {
    const double s = std::ldexp(1.0, -level);
    return {fx * s, fy * s, (cx + 0.5) * s - 0.5, (cy + 0.5) * s - 0.5, xi};
  }
};

struct RadTanParams {
  double k1 = 0, k2 = 0, p1 = 0, p2 = 0;
  bool is_zero() const { return k1 == 0 && k2 == 0 && p1 == 0 && p2 == 0; }
};

inline std::optional<Vec2> pinhole_project(const Vec3& x, const PinholeParams& p) {
  if (!(x.z() > 0)) return std::nullopt;
  return Vec2(p.fx * x.x() / x.z() + p.cx, p.fy * x.y() / x.z() + p.cy);
}

inline std::optional<Vec2> omni_project(const Vec3& x, const UnifiedOmniParams& p) {
  const double den = x.z() + x.norm() * p.xi;
  if (!(den > kMinProjectionDenominator)) return std::nullopt;
  return Vec2(p.fx * x.x() / den + p.cx, p.fy * x.y() / den + p.cy);
}

// Point on the unit sphere seen by pixel u, or nullopt when the pixel lies
// outside the region the model can unproject.
inline std::optional<Vec3> omni_unit_ray(const Vec2& u, const UnifiedOmniParams& p) {
  const double mx = (u.x() - p.cx) / p.fx;
  const double my = (u.y() - p.cy) / p.fy;
  const double r2 = mx * mx + my * my;
  const double disc = 1.0 + (1.0 - p.xi * p.xi) * r2;
  if (disc < 0) return std::nullopt;
  const double eta = (p.xi + std::sqrt(disc)) / (r2 + 1.0);
  Vec3 ray(eta * mx, eta * my, eta - p.xi);
  // For xi > 1 the second sphere intersection is not the visible one.
  if (p.xi > 1.0 && ray.z() < -1.0 / p.xi) return std::nullopt;
  return ray;
}

inline std::optional<Vec3> omni_unproject(const Vec2& u, double inv_dist, const UnifiedOmniParams& p) {
  if (!(inv_dist > 0)) return std::nullopt;
  auto ray = omni_unit_ray(u, p);
  if (!ray) return std::nullopt;
  return Vec3(*ray / inv_dist);
}

// d(pi)/dx, 2x3.
inline std::optional<Mat23> omni_project_jacobian(const Vec3& x, const UnifiedOmniParams& p) {
  const double n = x.norm();
  const double den = x.z() + n * p.xi;
  if (!(den > kMinProjectionDenominator)) return std::nullopt;
  const double inv = 1.0 / den;
  const double inv2 = inv * inv;
  // d(den)/dx = xi * x / n + e_z
  Vec3 dden = n > 0 ? Vec3(p.xi * x / n) : Vec3::Zero();
  dden.z() += 1.0;
  Mat23 J;
  J.row(0) = p.fx * (Eigen::RowVector3d(inv, 0, 0) - x.x() * inv2 * dden.transpose());
  J.row(1) = p.fy * (Eigen::RowVector3d(0, inv, 0) - x.y() * inv2 * dden.transpose());
  return J;
}

// d(pi)/d(fx, fy, cx, cy, xi) at fixed x, 2x5.
inline std::optional<Mat25> omni_project_intrinsics_jacobian(const Vec3& x, const UnifiedOmniParams& p) {
  const double n = x.norm();
  const double den = x.z() + n * p.xi;
  if (!(den > kMinProjectionDenominator)) return std::nullopt;
  Mat25 J = Mat25::Zero();
  J(0, 0) = x.x() / den;
  J(1, 1) = x.y() / den;
  J(0, 2) = 1.0;
  J(1, 3) = 1.0;
  J(0, 4) = -p.fx * x.x() * n / (den * den);
  J(1, 4) = -p.fy * x.y() * n / (den * den);
  return J;
}

// d(unit ray)/d(fx, fy, cx, cy, xi) at fixed pixel, 3x5.
inline std::optional<Mat35> omni_unit_ray_intrinsics_jacobian(const Vec2& u, const UnifiedOmniParams& p) {
  const double mx = (u.x() - p.cx) / p.fx;
  const double my = (u.y() - p.cy) / p.fy;
  const double r2 = mx * mx + my * my;
  const double disc = 1.0 + (1.0 - p.xi * p.xi) * r2;
  if (!(disc > 0)) return std::nullopt;
  const double sq = std::sqrt(disc);
  const double den = r2 + 1.0;
  const double eta = (p.xi + sq) / den;
  const double deta_dr2 = ((1.0 - p.xi * p.xi) / (2.0 * sq) * den - (p.xi + sq)) / (den * den);
  const double deta_dxi = (1.0 - p.xi * r2 / sq) / den;

  // d ray / d(mx, my)
  Mat32 dray_dm;
  dray_dm << eta + 2 * mx * mx * deta_dr2, 2 * mx * my * deta_dr2,
             2 * mx * my * deta_dr2, eta + 2 * my * my * deta_dr2,
             2 * mx * deta_dr2, 2 * my * deta_dr2;
  // d(mx, my) / d(fx, fy, cx, cy, xi)
  Eigen::Matrix<double, 2, 5> dm_dc = Eigen::Matrix<double, 2, 5>::Zero();
  dm_dc(0, 0) = -mx / p.fx;
  dm_dc(0, 2) = -1.0 / p.fx;
  dm_dc(1, 1) = -my / p.fy;
  dm_dc(1, 3) = -1.0 / p.fy;

  Mat35 J = dray_dm * dm_dc;
  J(0, 4) += mx * deta_dxi;
  J(1, 4) += my * deta_dxi;
  J(2, 4) += deta_dxi - 1.0;
  return J;
}

// ---------------------------------------------------------------------------
// Radial-tangential distortion on the normalized plane of the unified model.

inline Vec2 radtan_distort(const Vec2& m, const RadTanParams& d) {
  const double x = m.x(), y = m.y();
  const double r2 = x * x + y * y;
  const double radial = 1.0 + d.k1 * r2 + d.k2 * r2 * r2;
  return Vec2(x * radial + 2 * d.p1 * x * y + d.p2 * (r2 + 2 * x * x),
              y * radial + d.p1 * (r2 + 2 * y * y) + 2 * d.p2 * x * y);
}

struct UndistortResult {
  Vec2 point;
  int iterations = 0;
  bool converged = false;
};

// Inverse of radtan_distort by fixed-point iteration.
inline UndistortResult radtan_undistort_point(const Vec2& md, const RadTanParams& d, int max_iterations = 20,
                                              double tol = 1e-12) {
  Vec2 m = md;
  for (int it = 1; it <= max_iterations; ++it) {
    const double x = m.x(), y = m.y();
    const double r2 = x * x + y * y;
    const double radial = 1.0 + d.k1 * r2 + d.k2 * r2 * r2;
    const Vec2 tangential(2 * d.p1 * x * y + d.p2 * (r2 + 2 * x * x), d.p1 * (r2 + 2 * y * y) + 2 * d.p2 * x * y);
    const Vec2 next = (md - tangential) / radial;
    const double step = (next - m).norm();
    m = next;
    if (step < tol) return {m, it, true};
  }
  return {m, max_iterations, false};
}

// ---------------------------------------------------------------------------

enum class CameraKind { kOmni, kPinhole };

class CalibrationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A calibrated camera: model kind, unified intrinsics (xi = 0 for pinhole),
// optional lens distortion removed at ingestion, and the image size.
struct CameraModel {
  CameraKind kind = CameraKind::kOmni;
  UnifiedOmniParams intrinsics;
  RadTanParams distortion;
  int width = 0;
  int height = 0;
  // Half-angle of the usable field of view in radians; 0 = whole model domain.
  double max_half_angle = 0.0;

  static CameraModel omni(const UnifiedOmniParams& p, int w, int h) { return {CameraKind::kOmni, p, {}, w, h, 0.0}; }
  static CameraModel pinhole(const PinholeParams& p, int w, int h) {
    return {CameraKind::kPinhole, UnifiedOmniParams::from_pinhole(p), {}, w, h, 0.0};
  }

  CameraModel at_level(int level) const {
    CameraModel c = *this;
    c.intrinsics = intrinsics.at_level(level);
    c.width = width >> level;
    c.height = height >> level;
    return c;
  }

  std::optional<Vec2> project(const Vec3& x) const {
    if (kind == CameraKind::kPinhole) {
      return pinhole_project(x, {intrinsics.fx, intrinsics.fy, intrinsics.cx, intrinsics.cy});
    }
    return omni_project(x, intrinsics);
  }

  std::optional<Vec3> unit_ray(const Vec2& u) const {
    if (kind == CameraKind::kPinhole) {
      Vec3 r((u.x() - intrinsics.cx) / intrinsics.fx, (u.y() - intrinsics.cy) / intrinsics.fy, 1.0);
      return Vec3(r.normalized());
    }
    return omni_unit_ray(u, intrinsics);
  }

  std::optional<Vec3> unproject(const Vec2& u, double inv_dist) const {
    if (!(inv_dist > 0)) return std::nullopt;
    auto r = unit_ray(u);
    if (!r) return std::nullopt;
    return Vec3(*r / inv_dist);
  }

  bool in_image(const Vec2& u, double margin) const {
    return u.x() >= margin && u.y() >= margin && u.x() <= width - 1 - margin && u.y() <= height - 1 - margin;
  }

  bool within_angle(const Vec3& x) const {
    if (max_half_angle <= 0) return true;
    const double n = x.norm();
    return n > 0 && x.z() / n >= std::cos(max_half_angle);
  }

  // Pixel whose ray lies in the model domain and whose pattern neighborhood is
  // inside the image.
  bool valid_pixel(const Vec2& u, double margin) const {
    if (!in_image(u, margin)) return false;
    auto r = unit_ray(u);
    return r && within_angle(*r);
  }
};

// Omni camera whose field of view `fov_deg` exactly fills the image width,
// principal point at the image centre.
inline CameraModel omni_camera_for_fov(int width, int height, double fov_deg, double xi) {
  const double theta = 0.5 * fov_deg * 3.14159265358979323846 / 180.0;
  const double den = std::cos(theta) + xi;
  if (!(den > 0)) throw std::invalid_argument("field of view not representable with this xi");
  const double f = 0.5 * width * den / std::sin(theta);
  CameraModel cam = CameraModel::omni({f, f, 0.5 * (width - 1), 0.5 * (height - 1), xi}, width, height);
  cam.max_half_angle = theta;
  return cam;
}

// Pattern radius (2 px) plus 2 px interpolation slack.
inline constexpr double kFovMargin = 4.0;

inline bool is_in_fov(const Vec3& x, const CameraModel& cam, double margin = kFovMargin) {
  if (!cam.within_angle(x)) return false;
  auto u = cam.project(x);
  return u && cam.in_image(*u, margin);
}

// ---------------------------------------------------------------------------
// Calibration file:
//   model omni|pinhole
//   fx fy cx cy [xi]
//   [k1 k2 p1 p2]
//   width height

namespace detail {

inline std::vector<std::string> split_ws(const std::string& line) {
  std::istringstream ss(line);
  std::vector<std::string> out;
  std::string tok;
  while (ss >> tok) out.push_back(tok);
  return out;
}

inline double parse_double(const std::string& tok, const std::string& where) {
  std::size_t pos = 0;
  double v = 0;
  try {
    v = std::stod(tok, &pos);
  } catch (const std::exception&) {
    throw CalibrationError(where + ": not a number: '" + tok + "'");
  }
  if (pos != tok.size() || !std::isfinite(v)) throw CalibrationError(where + ": not a number: '" + tok + "'");
  return v;
}

}  // namespace detail

inline CameraModel read_calibration(std::istream& in, const std::string& name = "camera.txt") {
  std::vector<std::pair<int, std::vector<std::string>>> lines;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    auto toks = detail::split_ws(line);
    if (toks.empty()) continue;
    lines.emplace_back(lineno, std::move(toks));
  }
  auto where = [&](int ln) { return name + ":" + std::to_string(ln); };
  if (lines.size() < 3 || lines.size() > 4)
    throw CalibrationError(name + ": expected 3 or 4 non-empty lines, got " + std::to_string(lines.size()));

  CameraModel cam;
  const auto& [l1, t1] = lines[0];
  if (t1.size() != 2 || t1[0] != "model") throw CalibrationError(where(l1) + ": expected `model omni|pinhole`");
  if (t1[1] == "omni")
    cam.kind = CameraKind::kOmni;
  else if (t1[1] == "pinhole")
    cam.kind = CameraKind::kPinhole;
  else
    throw CalibrationError(where(l1) + ": unknown model '" + t1[1] + "'");

  const auto& [l2, t2] = lines[1];
  const std::size_t want = cam.kind == CameraKind::kOmni ? 5 : 4;
  if (t2.size() != want && !(cam.kind == CameraKind::kPinhole && t2.size() == 5))
    throw CalibrationError(where(l2) + ": expected " + std::to_string(want) + " intrinsic values");
  std::vector<double> v;
  for (const auto& t : t2) v.push_back(detail::parse_double(t, where(l2)));
  cam.intrinsics = {v[0], v[1], v[2], v[3], v.size() > 4 ? v[4] : 0.0};
  if (!(cam.intrinsics.fx > 0 && cam.intrinsics.fy > 0)) throw CalibrationError(where(l2) + ": focal lengths must be positive");
  if (cam.intrinsics.xi < 0) throw CalibrationError(where(l2) + ": xi must be non-negative");
  if (cam.kind == CameraKind::kPinhole && cam.intrinsics.xi != 0)
    throw CalibrationError(where(l2) + ": pinhole model cannot have xi != 0");

  std::size_t next = 2;
  if (lines.size() == 4) {
    const auto& [l3, t3] = lines[2];
    if (t3.size() != 4) throw CalibrationError(where(l3) + ": expected `k1 k2 p1 p2`");
    cam.distortion = {detail::parse_double(t3[0], where(l3)), detail::parse_double(t3[1], where(l3)),
                      detail::parse_double(t3[2], where(l3)), detail::parse_double(t3[3], where(l3))};
    next = 3;
  }
  const auto& [l4, t4] = lines[next];
  if (t4.size() != 2) throw CalibrationError(where(l4) + ": expected `width height`");
  const double w = detail::parse_double(t4[0], where(l4));
  const double h = detail::parse_double(t4[1], where(l4));
  if (w != std::floor(w) || h != std::floor(h) || w <= 0 || h <= 0)
    throw CalibrationError(where(l4) + ": width and height must be positive integers");
  cam.width = static_cast<int>(w);
  cam.height = static_cast<int>(h);
  if (cam.intrinsics.cx < 0 || cam.intrinsics.cx > cam.width || cam.intrinsics.cy < 0 || cam.intrinsics.cy > cam.height)
    throw CalibrationError(where(l2) + ": principal point outside the image");
  return cam;
}

inline CameraModel read_calibration(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw CalibrationError("cannot open " + path.string());
  return read_calibration(in, path.string());
}

inline void write_calibration(std::ostream& out, const CameraModel& cam) {
  const auto& p = cam.intrinsics;
  out.precision(17);
  out << "model " << (cam.kind == CameraKind::kOmni ? "omni" : "pinhole") << "\n";
  out << p.fx << " " << p.fy << " " << p.cx << " " << p.cy;
  if (cam.kind == CameraKind::kOmni) out << " " << p.xi;
  out << "\n";
  if (!cam.distortion.is_zero())
    out << cam.distortion.k1 << " " << cam.distortion.k2 << " " << cam.distortion.p1 << " " << cam.distortion.p2 << "\n";
  out << cam.width << " " << cam.height << "\n";
}

inline void write_calibration(const std::filesystem::path& path, const CameraModel& cam) {
  std::ofstream out(path);
  if (!out) throw CalibrationError("cannot write " + path.string());
  write_calibration(out, cam);
}

// ---------------------------------------------------------------------------
// Precomputed resampling maps.

struct MaskedImage {
  Image image;
  std::vector<std::uint8_t> valid;  // 1 where the source pixel was interpolable
};

class RemapTable {
 public:
  RemapTable() = default;
  RemapTable(int width, int height) : width_(width), height_(height), src_(static_cast<std::size_t>(width) * height) {}

  int width() const { return width_; }
  int height() const { return height_; }
  void set(int x, int y, std::optional<Vec2> src) { src_[static_cast<std::size_t>(y) * width_ + x] = src; }
  const std::optional<Vec2>& source(int x, int y) const { return src_[static_cast<std::size_t>(y) * width_ + x]; }

  MaskedImage apply(const Image& in) const {
    MaskedImage out{Image(width_, height_, 0.f, in.exposure()), std::vector<std::uint8_t>(src_.size(), 0)};
    for (int y = 0; y < height_; ++y)
      for (int x = 0; x < width_; ++x) {
        const auto& s = source(x, y);
        if (!s) continue;
        if (auto v = interp_intensity(in, *s)) {
          out.image(x, y) = static_cast<float>(*v);
          out.valid[static_cast<std::size_t>(y) * width_ + x] = 1;
        }
      }
    return out;
  }

 private:
  int width_ = 0;
  int height_ = 0;
  std::vector<std::optional<Vec2>> src_;
};

// Map from undistorted (pure unified-model) pixels to raw distorted pixels.
inline RemapTable make_undistort_map(const RadTanParams& rt, const UnifiedOmniParams& p, int width, int height) {
  RemapTable map(width, height);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      const Vec2 m((x - p.cx) / p.fx, (y - p.cy) / p.fy);
      const Vec2 md = rt.is_zero() ? m : radtan_distort(m, rt);
      map.set(x, y, rt.is_zero() ? Vec2(x, y) : Vec2(p.fx * md.x() + p.cx, p.fy * md.y() + p.cy));
    }
  return map;
}

inline MaskedImage radtan_undistort_image(const Image& raw, const RadTanParams& rt, const UnifiedOmniParams& p) {
  return make_undistort_map(rt, p, raw.width(), raw.height()).apply(raw);
}

// Central pinhole view resampled out of an omnidirectional image.
struct PinholeCrop {
  CameraModel camera;
  RemapTable map;
};

inline PinholeCrop make_pinhole_crop(const CameraModel& src, int out_width, int out_height, double fov_deg) {
  constexpr double kPi = 3.14159265358979323846;
  if (!(fov_deg > 0 && fov_deg < 180)) throw CalibrationError("pinhole crop needs a field of view in (0, 180) degrees");
  const double f = 0.5 * out_width / std::tan(0.5 * fov_deg * kPi / 180.0);
  PinholeParams pp{f, f, 0.5 * (out_width - 1), 0.5 * (out_height - 1)};
  PinholeCrop crop{CameraModel::pinhole(pp, out_width, out_height), RemapTable(out_width, out_height)};
  for (int y = 0; y < out_height; ++y)
    for (int x = 0; x < out_width; ++x) {
      const Vec3 ray((x - pp.cx) / pp.fx, (y - pp.cy) / pp.fy, 1.0);
      crop.map.set(x, y, src.project(ray));
    }
  return crop;
}

}  // namespace omnivo
