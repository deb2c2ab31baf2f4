#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <vector>

#include <Eigen/Core>

#include "omnivo/camera.hpp"
#include "omnivo/geometry.hpp"
#include "omnivo/image.hpp"
#include "omnivo/residuals.hpp"

namespace omnivo {

// Search interval of a never-observed point, in 1/m.
inline constexpr double kFirstSearchMinInvDist = 0.0;
inline constexpr double kFirstSearchMaxInvDist = 10.0;

enum class MatchStatus { kFound, kAmbiguous, kOutOfBounds, kLowGradient, kDegenerate };

inline const char* to_string(MatchStatus s) {
  switch (s) {
    case MatchStatus::kFound: return "found";
    case MatchStatus::kAmbiguous: return "ambiguous";
    case MatchStatus::kOutOfBounds: return "out_of_bounds";
    case MatchStatus::kLowGradient: return "low_gradient";
    case MatchStatus::kDegenerate: return "degenerate";
  }
  return "?";
}

// Chord on the target unit sphere spanned by a host ray's inverse-distance
// interval. p0 belongs to d_min (far end), p_inf to d_max (near end).
struct EpiSegment {
  Vec2 host_pixel = Vec2::Zero();
  Vec3 ray = Vec3::UnitZ();  // host unit ray
  SE3 rel;                   // host -> target
  double d_min = 0, d_max = 0;
  Vec3 p0 = Vec3::UnitZ(), p_inf = Vec3::UnitZ();
  bool degenerate = false;
  bool truncated = false;

  // Unnormalized point on the ray, R ray + d t; its direction is the sphere
  // point of inverse distance d.
  Vec3 ray_point(double d) const { return rel.rotation() * ray + d * rel.translation(); }

  Vec3 point(double alpha) const { return alpha * p0 + (1.0 - alpha) * p_inf; }

  // Inverse distance whose target direction is p_L(alpha). Exact because the
  // chord lies in the epipolar plane: p_L = c1 R ray + c2 t.
  double inv_dist(double alpha) const {
    const double n0 = ray_point(d_min).norm(), n1 = ray_point(d_max).norm();
    const double c1 = alpha / n0 + (1.0 - alpha) / n1;
    const double c2 = alpha * d_min / n0 + (1.0 - alpha) * d_max / n1;
    return c2 / c1;
  }

  // Inverse of inv_dist(): alpha at which the chord passes through the
  // direction of inverse distance d.
  double alpha_of(double d) const {
    const double n0 = ray_point(d_min).norm(), n1 = ray_point(d_max).norm();
    // d (alpha/n0 + (1-alpha)/n1) = alpha d_min/n0 + (1-alpha) d_max/n1
    const double num = d_max / n1 - d / n1;
    const double den = d / n0 - d / n1 - d_min / n0 + d_max / n1;
    return std::abs(den) < 1e-300 ? 0.0 : num / den;
  }
};

inline double angle_between(const Vec3& a, const Vec3& b) {
  return std::atan2(a.cross(b).norm(), a.dot(b));
}

inline constexpr double kMaxSegmentAngle = M_PI / 2;

inline std::optional<EpiSegment> make_segment(const Vec2& pixel, const SE3& host_to_target, double d_min,
                                              double d_max, const CameraModel& cam) {
  auto ray = cam.unit_ray(pixel);
  if (!ray || !(d_min >= 0) || !(d_max > d_min)) return std::nullopt;
  EpiSegment s;
  s.host_pixel = pixel;
  s.ray = *ray;
  s.rel = host_to_target;
  s.d_min = d_min;
  s.d_max = d_max;
  s.p0 = s.ray_point(d_min).normalized();
  s.p_inf = s.ray_point(d_max).normalized();
  if (host_to_target.translation().norm() < 1e-9 || angle_between(s.p0, s.p_inf) < 1e-9) {
    s.degenerate = true;
    return s;
  }
  // Long chords pass close to the sphere centre; keep the far end and pull
  // the near end in until the segment subtends at most 90 degrees.
  if (angle_between(s.p0, s.p_inf) > kMaxSegmentAngle) {
    double lo = d_min, hi = d_max;
    for (int it = 0; it < 60; ++it) {
      const double mid = 0.5 * (lo + hi);
      (angle_between(s.p0, s.ray_point(mid).normalized()) > kMaxSegmentAngle ? hi : lo) = mid;
    }
    s.d_max = lo;
    s.p_inf = s.ray_point(lo).normalized();
    s.truncated = true;
  }
  return s;
}

inline std::optional<Vec2> curve_point(const EpiSegment& seg, double alpha, const CameraModel& cam) {
  const Vec3 p = seg.point(alpha);
  if (!cam.within_angle(p)) return std::nullopt;
  return cam.project(p);
}

// d u_L / d alpha.
inline std::optional<Vec2> curve_tangent(const EpiSegment& seg, double alpha, const CameraModel& cam) {
  auto J = omni_project_jacobian(seg.point(alpha), cam.intrinsics);
  if (!J) return std::nullopt;
  return Vec2(*J * (seg.p0 - seg.p_inf));
}

inline constexpr double kFallbackAlphaStep = 0.01;

// Increment of alpha that advances the curve by about one pixel.
inline double alpha_step(const EpiSegment& seg, double alpha, const CameraModel& cam) {
  auto t = curve_tangent(seg, alpha, cam);
  if (!t) return kFallbackAlphaStep;
  const double n = t->norm();
  if (!std::isfinite(n) || n < 1e-9) return kFallbackAlphaStep;
  return 1.0 / n;
}

struct EpipolarConfig {
  double ambiguity_ratio = 0.85;     // best/second-best SSD above this is ambiguous
  int second_best_radius = 2;        // in steps
  double min_epipolar_grad_sq = 16;  // mean squared gradient along the curve
  double sigma_scale = 2.0;          // new interval = estimate +- sigma_scale * sigma
  int refine_iterations = 6;
  double energy_floor = 1e-6;        // regularizes the ratio for near-perfect matches
};

struct MatchResult {
  MatchStatus status = MatchStatus::kDegenerate;
  double alpha_best = 0;
  Vec2 pixel = Vec2::Zero();
  double d_refined = 0;
  double second_best_ratio = 0;  // second / best SSD
  double energy = 0;             // SSD at the refined match
  double sigma_pixel = 0;        // matching uncertainty along the curve, px
  double new_d_min = 0, new_d_max = 0;
  double pixel_interval = 0;     // curve length searched, px
  int steps = 0;
};

namespace detail {

// Host-to-target pattern warp linearized at inverse distance d.
inline std::optional<Eigen::Matrix2d> local_warp(const EpiSegment& seg, double d, const CameraModel& cam) {
  auto c = cam.unproject(seg.host_pixel, d);
  auto x = cam.unproject(seg.host_pixel + Vec2(1, 0), d);
  auto y = cam.unproject(seg.host_pixel + Vec2(0, 1), d);
  if (!c || !x || !y) return std::nullopt;
  auto uc = cam.project(seg.rel * *c);
  auto ux = cam.project(seg.rel * *x);
  auto uy = cam.project(seg.rel * *y);
  if (!uc || !ux || !uy) return std::nullopt;
  Eigen::Matrix2d A;
  A.col(0) = *ux - *uc;
  A.col(1) = *uy - *uc;
  return A;
}

struct PatternSample {
  double energy = 0;
  Vec8 r = Vec8::Zero();
  std::array<Vec2, kPatternSize> grad{};
};

inline std::optional<PatternSample> sample_pattern(const HostPatch& patch, const Vec2& center, const Eigen::Matrix2d& A,
                                                   const ImageLevel& target, const AffineTransfer& affine) {
  PatternSample s;
  for (int k = 0; k < kPatternSize; ++k) {
    const Vec2 off(kResidualPattern[k][0], kResidualPattern[k][1]);
    auto v = interp(target, center + A * off);
    if (!v) return std::nullopt;
    s.r[k] = affine.residual(v->value, patch.intensity[k]);
    s.grad[k] = Vec2(v->gx, v->gy);
  }
  s.energy = s.r.squaredNorm();
  return s;
}

}  // namespace detail

// Discrete search along the epipolar curve from alpha = 0 (near end) to 1,
// followed by sub-step refinement of the best match.
inline MatchResult search(const EpiSegment& seg, const HostPatch& patch, const ImageLevel& target,
                          const AffineTransfer& affine, const CameraModel& cam,
                          const EpipolarConfig& cfg = {}) {
  MatchResult res;
  res.new_d_min = seg.d_min;
  res.new_d_max = seg.d_max;
  if (seg.degenerate) return res;

  struct Sample {
    double alpha;
    double energy;
  };
  std::vector<Sample> samples;
  std::vector<double> valid_alphas;
  double alpha = 0;
  Vec2 prev_px = Vec2::Constant(std::numeric_limits<double>::quiet_NaN());
  while (alpha <= 1.0 + 1e-12 && res.steps < 10000) {
    ++res.steps;
    auto u = curve_point(seg, alpha, cam);
    if (u) {
      if (prev_px.allFinite()) res.pixel_interval += (*u - prev_px).norm();
      prev_px = *u;
      auto A = detail::local_warp(seg, seg.inv_dist(alpha), cam);
      auto s = A ? detail::sample_pattern(patch, *u, *A, target, affine) : std::nullopt;
      samples.push_back({alpha, s ? s->energy : std::numeric_limits<double>::infinity()});
    } else {
      samples.push_back({alpha, std::numeric_limits<double>::infinity()});
    }
    alpha += alpha_step(seg, alpha, cam);
  }

  int best = -1;
  for (int i = 0; i < static_cast<int>(samples.size()); ++i)
    if (std::isfinite(samples[static_cast<std::size_t>(i)].energy) &&
        (best < 0 || samples[static_cast<std::size_t>(i)].energy < samples[static_cast<std::size_t>(best)].energy))
      best = i;
  if (best < 0) {
    res.status = MatchStatus::kOutOfBounds;
    return res;
  }
  double second = std::numeric_limits<double>::infinity();
  for (int i = 0; i < static_cast<int>(samples.size()); ++i)
    if (std::abs(i - best) >= cfg.second_best_radius) second = std::min(second, samples[static_cast<std::size_t>(i)].energy);
  const double e_best = samples[static_cast<std::size_t>(best)].energy;

  // Quadratic fit through the best sample and its neighbours.
  double a_star = samples[static_cast<std::size_t>(best)].alpha;
  if (best > 0 && best + 1 < static_cast<int>(samples.size())) {
    const auto& l = samples[static_cast<std::size_t>(best - 1)];
    const auto& r = samples[static_cast<std::size_t>(best + 1)];
    if (std::isfinite(l.energy) && std::isfinite(r.energy)) {
      const double h_l = a_star - l.alpha, h_r = r.alpha - a_star;
      // Parabola through (-h_l, El), (0, E0), (h_r, Er).
      const double d1 = (r.energy - e_best) / h_r, d0 = (e_best - l.energy) / h_l;
      const double curv = (d1 - d0) / (0.5 * (h_l + h_r));
      if (curv > 0) {
        const double slope = (d0 * h_r + d1 * h_l) / (h_l + h_r);
        const double shift = std::clamp(-slope / curv, -h_l, h_r);
        a_star += shift;
      }
    }
  }

  // Gauss-Newton on alpha.
  double a_lo = best > 0 ? samples[static_cast<std::size_t>(best - 1)].alpha : 0.0;
  double a_hi = best + 1 < static_cast<int>(samples.size()) ? samples[static_cast<std::size_t>(best + 1)].alpha : 1.0;
  auto eval = [&](double a) -> std::optional<std::pair<detail::PatternSample, Vec2>> {
    auto u = curve_point(seg, a, cam);
    if (!u) return std::nullopt;
    auto A = detail::local_warp(seg, seg.inv_dist(a), cam);
    if (!A) return std::nullopt;
    auto s = detail::sample_pattern(patch, *u, *A, target, affine);
    if (!s) return std::nullopt;
    return std::make_pair(*s, *u);
  };
  auto cur = eval(a_star);
  if (!cur || cur->first.energy > e_best) {
    a_star = samples[static_cast<std::size_t>(best)].alpha;
    cur = eval(a_star);
  }
  if (!cur) {
    res.status = MatchStatus::kOutOfBounds;
    return res;
  }
  for (int it = 0; it < cfg.refine_iterations; ++it) {
    auto tan = curve_tangent(seg, a_star, cam);
    if (!tan) break;
    double H = 0, g = 0;
    for (int k = 0; k < kPatternSize; ++k) {
      const double J = cur->first.grad[static_cast<std::size_t>(k)].dot(*tan);
      H += J * J;
      g += J * cur->first.r[k];
    }
    if (!(H > 0)) break;
    const double a_new = std::clamp(a_star - g / H, a_lo, a_hi);
    auto next = eval(a_new);
    if (!next || next->first.energy >= cur->first.energy) break;
    const double moved_px = std::abs(a_new - a_star) * tan->norm();
    a_star = a_new;
    cur = next;
    if (moved_px < 1e-3) break;
  }

  res.alpha_best = a_star;
  res.pixel = cur->second;
  res.energy = cur->first.energy;
  res.d_refined = std::clamp(seg.inv_dist(a_star), seg.d_min, seg.d_max);
  res.second_best_ratio = (second + cfg.energy_floor) / (e_best + cfg.energy_floor);

  // Gradient along / across the curve decides how well the match is
  // localized; a patch without gradient along the curve cannot be matched.
  auto tan = curve_tangent(seg, a_star, cam);
  double along = 0, across = 0;
  if (tan && tan->norm() > 0) {
    const Vec2 dir = tan->normalized();
    const Vec2 perp(-dir.y(), dir.x());
    for (const auto& gk : cur->first.grad) {
      along += std::pow(gk.dot(dir), 2);
      across += std::pow(gk.dot(perp), 2);
    }
  }
  // Target gradients in host intensity units.
  const double s2 = affine.scale() * affine.scale();
  along /= s2;
  across /= s2;
  // A flat or repeating energy along the curve is reported first: for
  // texture parallel to the curve it is the more informative status.
  if ((e_best + cfg.energy_floor) / (second + cfg.energy_floor) > cfg.ambiguity_ratio && std::isfinite(second)) {
    res.status = MatchStatus::kAmbiguous;
    return res;
  }
  if (along < cfg.min_epipolar_grad_sq * kPatternSize) {
    res.status = MatchStatus::kLowGradient;
    return res;
  }
  res.sigma_pixel = 0.2 + 0.2 * (along + across) / along;
  const double sigma_alpha = res.sigma_pixel / tan->norm();
  const double d_a = seg.inv_dist(std::clamp(a_star - cfg.sigma_scale * sigma_alpha, 0.0, 1.0));
  const double d_b = seg.inv_dist(std::clamp(a_star + cfg.sigma_scale * sigma_alpha, 0.0, 1.0));
  res.new_d_min = std::max(0.0, std::min(d_a, d_b));
  res.new_d_max = std::max(d_a, d_b);
  res.status = MatchStatus::kFound;
  return res;
}

}  // namespace omnivo
