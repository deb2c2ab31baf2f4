#pragma once

#include <array>
#include <cmath>
#include <optional>

#include <Eigen/Core>

#include "omnivo/camera.hpp"
#include "omnivo/geometry.hpp"
#include "omnivo/image.hpp"

namespace omnivo {

inline constexpr int kPatternSize = 8;

// Eight-pixel spread pattern around the point, radius 2 px.
inline constexpr std::array<std::array<int, 2>, kPatternSize> kResidualPattern = {
    {{0, 0}, {-2, 0}, {2, 0}, {0, -2}, {0, 2}, {-1, -1}, {1, -1}, {-1, 1}}};

inline constexpr double kDefaultHuberThreshold = 9.0;
inline constexpr double kDefaultGradientWeightConstant = 50.0;

// IRLS weight of the Huber norm.
inline double huber_weight(double r, double gamma) {
  const double a = std::abs(r);
  return a <= gamma ? 1.0 : gamma / a;
}

// Huber penalty: r^2 inside the threshold, 2 gamma |r| - gamma^2 outside.
inline double huber_energy(double r, double gamma) {
  const double w = huber_weight(r, gamma);
  return w * (2.0 - w) * r * r;
}

// c^2 / (c^2 + |grad|^2).
inline double gradient_weight(double gx, double gy, double c = kDefaultGradientWeightConstant) {
  return c * c / (c * c + gx * gx + gy * gy);
}

// Per-frame brightness correction parameters: log-scale a and offset b.
struct AffineBrightness {
  double a = 0;
  double b = 0;
};

// Brightness transfer from a host frame i to a target frame j:
//   I_j - b_j  ~  scale * (I_i - b_i),  scale = t_j e^{a_j} / (t_i e^{a_i}).
struct AffineTransfer {
  double exposure_host = 1, exposure_target = 1;
  AffineBrightness host, target;

  double scale() const {
    return exposure_target / exposure_host * std::exp(target.a - host.a);
  }
  double residual(double target_intensity, double host_intensity) const {
    return (target_intensity - target.b) - scale() * (host_intensity - host.b);
  }
};

// Host-side data of a point, fixed once the point is created.
struct HostPatch {
  Vec2 pixel = Vec2::Zero();
  std::array<double, kPatternSize> intensity{};
  std::array<double, kPatternSize> weight{};  // gradient weights w_p
  double grad_sq_sum = 0;                     // sum of squared host gradients

  Vec2 pattern_pixel(int k) const {
    return pixel + Vec2(kResidualPattern[k][0], kResidualPattern[k][1]);
  }
};

// nullopt if any pattern pixel of `pixel` is not interpolable.
inline std::optional<HostPatch> make_host_patch(const ImageLevel& img, const Vec2& pixel,
                                                double grad_weight_c = kDefaultGradientWeightConstant) {
  HostPatch h;
  h.pixel = pixel;
  for (int k = 0; k < kPatternSize; ++k) {
    auto s = interp(img, h.pattern_pixel(k));
    if (!s) return std::nullopt;
    h.intensity[k] = s->value;
    h.weight[k] = gradient_weight(s->gx, s->gy, grad_weight_c);
    h.grad_sq_sum += s->gx * s->gx + s->gy * s->gy;
  }
  return h;
}

enum class ResidualState { kActive, kOutOfBounds, kOutlier };

using Vec8 = Eigen::Matrix<double, kPatternSize, 1>;

// Jacobians of the 8 pattern residuals w.r.t. every optimised variable.
// Pose blocks use left-multiplied increments exp(delta) * T on world-to-camera
// poses with (v, w) ordering; affine blocks are (a, b); intrinsics are
// (fx, fy, cx, cy, xi).
struct ResidualJacobians {
  Eigen::Matrix<double, kPatternSize, 6> host_pose;
  Eigen::Matrix<double, kPatternSize, 6> target_pose;
  Eigen::Matrix<double, kPatternSize, 2> host_affine;
  Eigen::Matrix<double, kPatternSize, 2> target_affine;
  Vec8 inv_dist;
  Eigen::Matrix<double, kPatternSize, 5> intrinsics;
};

struct ResidualEvaluation {
  ResidualState state = ResidualState::kOutOfBounds;
  double energy = 0;                     // sum_k w_p huber(r_k)
  Vec8 r = Vec8::Zero();
  Vec8 weight = Vec8::Zero();            // w_p * huber IRLS weight
  std::array<Vec2, kPatternSize> target_pixels{};
  std::optional<ResidualJacobians> jac;
};

struct ResidualOptions {
  double huber_threshold = kDefaultHuberThreshold;
  double outlier_energy = 12.0 * 12.0 * kPatternSize;  // per-pattern energy cut
  double fov_margin = kFovMargin;
};

// Photometric residual of one point observed in a target frame.
// `host_to_target` = T_target * T_host^-1.
inline ResidualEvaluation evaluate_residual(const HostPatch& patch, double inv_dist, const SE3& host_to_target,
                                            const CameraModel& cam, const ImageLevel& target,
                                            const AffineTransfer& affine, const ResidualOptions& opt,
                                            bool with_jacobians) {
  ResidualEvaluation ev;
  if (!(inv_dist > 0)) return ev;
  const Mat3 R = host_to_target.rotation();
  const Vec3& t = host_to_target.translation();
  const double scale = affine.scale();
  const auto& c = cam.intrinsics;

  ResidualJacobians J;
  for (int k = 0; k < kPatternSize; ++k) {
    const Vec2 hp = patch.pattern_pixel(k);
    auto ray = cam.unit_ray(hp);
    if (!ray) return ev;
    const Vec3 Xh = *ray / inv_dist;
    const Vec3 Xt = R * Xh + t;
    if (!is_in_fov(Xt, cam, opt.fov_margin)) return ev;
    auto u = omni_project(Xt, c);
    if (!u) return ev;
    auto s = interp(target, *u);
    if (!s) return ev;
    ev.target_pixels[k] = *u;
    const double host_i = patch.intensity[k];
    const double r = affine.residual(s->value, host_i);
    ev.r[k] = r;
    const double hw = huber_weight(r, opt.huber_threshold);
    ev.weight[k] = patch.weight[k] * hw;
    ev.energy += patch.weight[k] * hw * (2.0 - hw) * r * r;

    if (!with_jacobians) continue;
    auto Jp = omni_project_jacobian(Xt, c);
    auto Jc = omni_project_intrinsics_jacobian(Xt, c);
    auto Jray = omni_unit_ray_intrinsics_jacobian(hp, c);
    if (!Jp || !Jc || !Jray) return ev;
    const Eigen::RowVector2d g(s->gx, s->gy);
    const Eigen::RowVector3d gJ = g * *Jp;  // dr / dXt

    // Target: dXt/d(v,w) = [I, -[Xt]x]
    J.target_pose.block<1, 3>(k, 0) = gJ;
    J.target_pose.block<1, 3>(k, 3) = -gJ * hat(Xt);
    // Host: dXt/d(v,w) = [-R, R [Xh]x]
    J.host_pose.block<1, 3>(k, 0) = -gJ * R;
    J.host_pose.block<1, 3>(k, 3) = gJ * R * hat(Xh);
    J.inv_dist[k] = -gJ.dot(R * *ray) / (inv_dist * inv_dist);
    J.intrinsics.row(k) = g * (*Jc + *Jp * R * *Jray / inv_dist);

    const double centred = host_i - affine.host.b;
    J.target_affine(k, 0) = -scale * centred;
    J.target_affine(k, 1) = -1.0;
    J.host_affine(k, 0) = scale * centred;
    J.host_affine(k, 1) = scale;
  }
  ev.state = ev.energy > opt.outlier_energy ? ResidualState::kOutlier : ResidualState::kActive;
  if (with_jacobians) ev.jac = J;
  return ev;
}

}  // namespace omnivo
