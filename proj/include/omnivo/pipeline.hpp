#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <optional>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Core>

#include "omnivo/camera.hpp"
#include "omnivo/epipolar.hpp"
#include "omnivo/geometry.hpp"
#include "omnivo/image.hpp"
#include "omnivo/optimizer.hpp"
#include "omnivo/residuals.hpp"

namespace omnivo {

using Vec8d = Eigen::Matrix<double, 8, 1>;
using Mat8d = Eigen::Matrix<double, 8, 8>;

struct PipelineConfig {
  // Window policy.
  int nf = 7;
  double visibility_min = 0.05;
  int candidate_count = 800;
  int activation_target = 2000;
  double d_cap = 100;  // upper end of an unconstrained inverse-distance interval

  // Frame tracking.
  std::array<int, kPyramidLevels> track_iterations{{10, 10, 10, 10, 10}};  // per level, finest first
  double track_converged_rel = 1e-3;  // per-level stop on relative energy decrease
  double track_point_cutoff = 20.0 * 20.0 * kPatternSize;                   // per-point energy cap
  double track_max_rmse = 15.0;
  int track_min_points = 50;
  double track_accept_ratio = 1.5;  // stop trying initializers below this multiple of the last rmse
  double track_min_gradient = 1.0;  // rms target gradient at the warped points; below it nothing constrains the pose

  // Keyframe decision; flow weights are divided by (width + height).
  double kf_flow_weight = 0.02 * 1120;
  double kf_translation_weight = 0.04 * 1120;
  double kf_affine_weight = 2.0;

  // Candidate selection and refinement.
  int selection_block = 32;
  double selection_threshold = 7.0;  // added to the block median gradient
  int max_ambiguous = 2;
  double activation_max_interval_px = 8.0;
  double activation_min_quality = 3.0;
  double activation_max_rel_sigma = 0.5;  // sigma_d / d
  EpipolarConfig epipolar;

  // Two-frame initializer.
  int bootstrap_points = 2000;
  std::array<int, kPyramidLevels> bootstrap_iterations{{5, 5, 10, 30, 50}};
  double bootstrap_alpha_w = 150.0 * 150.0;
  double bootstrap_alpha_k = 2.5 * 2.5;
  double bootstrap_coupling_w = 1.0;
  double bootstrap_min_flow = 4.0;  // translation-induced flow RMS, px
  double bootstrap_max_rmse = 3.0;
  int bootstrap_max_frames = 30;

  ResidualOptions residual;
  OptimizerConfig optimizer;
};

// ---------------------------------------------------------------------------
// Validity masks

using LevelMasks = std::array<std::vector<std::uint8_t>, kPyramidLevels>;

// A coarse pixel is valid only when all of its level-0 children are.
// Empty masks mean every pixel is valid.
inline LevelMasks level_masks(const Frame& f) {
  LevelMasks m;
  if (f.valid.empty()) return m;
  m[0] = f.valid;
  int w = f.pyramid.width(), h = f.pyramid.height();
  for (int l = 1; l < kPyramidLevels; ++l) {
    const int wl = w / 2, hl = h / 2;
    m[l].assign(static_cast<std::size_t>(wl) * hl, 0);
    const auto& p = m[l - 1];
    for (int y = 0; y < hl; ++y)
      for (int x = 0; x < wl; ++x) {
        const auto at = [&](int xx, int yy) { return p[static_cast<std::size_t>(yy) * w + xx]; };
        m[l][static_cast<std::size_t>(y) * wl + x] =
            at(2 * x, 2 * y) && at(2 * x + 1, 2 * y) && at(2 * x, 2 * y + 1) && at(2 * x + 1, 2 * y + 1);
      }
    w = wl;
    h = hl;
  }
  return m;
}

// True when every pixel within `radius` of u is valid.
inline bool mask_ok(const std::vector<std::uint8_t>& m, int w, int h, const Vec2& u, int radius) {
  if (m.empty()) return true;
  const int x0 = static_cast<int>(std::floor(u.x())) - radius, x1 = static_cast<int>(std::ceil(u.x())) + radius;
  const int y0 = static_cast<int>(std::floor(u.y())) - radius, y1 = static_cast<int>(std::ceil(u.y())) + radius;
  if (x0 < 0 || y0 < 0 || x1 >= w || y1 >= h) return false;
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x)
      if (!m[static_cast<std::size_t>(y) * w + x]) return false;
  return true;
}

// Pixel on level `level` usable as a point: pattern inside the image and the
// field of view, and not masked.
inline bool usable_pixel(const CameraModel& cam_l, const std::vector<std::uint8_t>& mask_l, const Vec2& u) {
  if (!cam_l.valid_pixel(u, 3.0)) return false;
  return mask_ok(mask_l, cam_l.width, cam_l.height, u, 3);
}

// ---------------------------------------------------------------------------
// Frame tracking against the sparse distance map of a reference keyframe

struct DepthSample {
  Vec2 pixel;  // level 0
  double inv_dist = 1;
};

struct ReferencePoint {
  Vec2 pixel;  // at its level
  double inv_dist = 1;
  Vec3 centre;  // point in the reference camera
  std::array<Vec3, kPatternSize> X;
  std::array<double, kPatternSize> intensity{}, weight{};
};

struct TrackingReference {
  int kf_id = -1;
  SE3 pose;  // world -> reference camera
  AffineBrightness affine;
  double exposure = 1;
  CameraModel camera;
  std::array<std::vector<ReferencePoint>, kPyramidLevels> levels;

  std::size_t num_points() const { return levels[0].size(); }
};

// Distance samples are averaged per pixel of each level.
inline TrackingReference make_tracking_reference(const Frame& frame, const CameraModel& cam, const SE3& pose,
                                                 const AffineBrightness& affine,
                                                 const std::vector<DepthSample>& samples, int kf_id = -1) {
  TrackingReference ref;
  ref.kf_id = kf_id;
  ref.pose = pose;
  ref.affine = affine;
  ref.exposure = frame.exposure();
  ref.camera = cam;
  const auto masks = level_masks(frame);
  for (int l = 0; l < kPyramidLevels; ++l) {
    const CameraModel cl = cam.at_level(l);
    const ImageLevel& img = frame.pyramid.level(l);
    const int w = img.width(), h = img.height();
    std::vector<double> sum(static_cast<std::size_t>(w) * h, 0.0);
    std::vector<int> cnt(sum.size(), 0);
    const double s = 1.0 / (1 << l);
    for (const auto& d : samples) {
      const Vec2 ul = (d.pixel + Vec2(0.5, 0.5)) * s - Vec2(0.5, 0.5);
      const int x = static_cast<int>(std::lround(ul.x())), y = static_cast<int>(std::lround(ul.y()));
      if (x < 0 || y < 0 || x >= w || y >= h || !(d.inv_dist > 0)) continue;
      sum[static_cast<std::size_t>(y) * w + x] += d.inv_dist;
      ++cnt[static_cast<std::size_t>(y) * w + x];
    }
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const std::size_t i = static_cast<std::size_t>(y) * w + x;
        if (!cnt[i]) continue;
        ReferencePoint p;
        p.pixel = Vec2(x, y);
        p.inv_dist = sum[i] / cnt[i];
        if (!mask_ok(masks[l], w, h, p.pixel, 3) || !img.inside(p.pixel, 2.0)) continue;
        auto c = cl.unit_ray(p.pixel);
        if (!c) continue;
        p.centre = *c / p.inv_dist;
        bool ok = true;
        for (int k = 0; k < kPatternSize && ok; ++k) {
          const Vec2 q = p.pixel + Vec2(kResidualPattern[k][0], kResidualPattern[k][1]);
          auto r = cl.unit_ray(q);
          auto v = interp(img, q);
          if (!r || !v || !cl.within_angle(*r)) {
            ok = false;
            break;
          }
          p.X[k] = *r / p.inv_dist;
          p.intensity[k] = v->value;
          p.weight[k] = gradient_weight(v->gx, v->gy);
        }
        if (ok) ref.levels[l].push_back(p);
      }
  }
  return ref;
}

struct TrackResult {
  bool ok = false;
  SE3 rel;  // reference camera -> new camera
  AffineBrightness affine;
  double rmse = std::numeric_limits<double>::infinity();
  int num_points = 0;  // level-0 points with an in-bounds residual
  int initializer = -1;
};

namespace detail {

struct TrackSystem {
  Mat8d H = Mat8d::Zero();
  Vec8d b = Vec8d::Zero();
  double energy = 0;  // photometric, capped per point
  double prior = 0;
  int num_in = 0;     // points with an in-bounds residual
  int num_pixels = 0;
  double grad_sq = 0;  // target gradient energy over in-bounds points

  double normalized() const { return num_in > 0 ? (energy + prior) / num_in : std::numeric_limits<double>::infinity(); }
};

inline TrackSystem track_linearize(const TrackingReference& ref, int level, const ImageLevel& img, double exposure,
                                   const SE3& rel, const AffineBrightness& aff, const PipelineConfig& cfg) {
  TrackSystem sys;
  const CameraModel cl = ref.camera.at_level(level);
  const Mat3 R = rel.rotation();
  const Vec3& t = rel.translation();
  const AffineTransfer tr{ref.exposure, exposure, ref.affine, aff};
  const double scale = tr.scale();
  const double gamma = cfg.residual.huber_threshold;
  Eigen::Matrix<double, kPatternSize, 8> J;
  Vec8d r, wr;
  for (const auto& p : ref.levels[static_cast<std::size_t>(level)]) {
    double e = 0, g2 = 0;
    bool ok = true;
    for (int k = 0; k < kPatternSize; ++k) {
      const Vec3 Xt = R * p.X[k] + t;
      if (!cl.within_angle(Xt)) {
        ok = false;
        break;
      }
      auto u = omni_project(Xt, cl.intrinsics);
      if (!u || !cl.in_image(*u, 1.0)) {
        ok = false;
        break;
      }
      auto s = interp(img, *u);
      auto Jp = omni_project_jacobian(Xt, cl.intrinsics);
      if (!s || !Jp) {
        ok = false;
        break;
      }
      const double res = tr.residual(s->value, p.intensity[k]);
      const double hw = huber_weight(res, gamma);
      e += p.weight[k] * hw * (2.0 - hw) * res * res;
      g2 += s->gx * s->gx + s->gy * s->gy;
      const Eigen::RowVector3d gJ = Eigen::RowVector2d(s->gx, s->gy) * *Jp;
      J.block<1, 3>(k, 0) = gJ;
      J.block<1, 3>(k, 3) = -gJ * hat(Xt);
      J(k, 6) = -scale * (p.intensity[k] - ref.affine.b);
      J(k, 7) = -1.0;
      r[k] = res;
      wr[k] = p.weight[k] * hw;
    }
    if (!ok) continue;
    ++sys.num_in;
    sys.grad_sq += g2;
    if (e > cfg.track_point_cutoff) {
      sys.energy += cfg.track_point_cutoff;
      continue;
    }
    sys.energy += e;
    sys.num_pixels += kPatternSize;
    sys.H.noalias() += J.transpose() * wr.asDiagonal() * J;
    sys.b.noalias() += J.transpose() * wr.cwiseProduct(r);
  }
  const double wa = cfg.optimizer.affine_prior_a, wb = cfg.optimizer.affine_prior_b;
  sys.prior = wa * aff.a * aff.a + wb * aff.b * aff.b;
  sys.H(6, 6) += wa;
  sys.b(6) += wa * aff.a;
  sys.H(7, 7) += wb;
  sys.b(7) += wb * aff.b;
  return sys;
}

}  // namespace detail

// Coarse-to-fine Levenberg-Marquardt alignment of `frame` to the reference,
// over the relative pose and the frame's affine brightness.
inline TrackResult align_frame(const TrackingReference& ref, const Frame& frame, const SE3& init_rel,
                               const AffineBrightness& init_affine, const PipelineConfig& cfg) {
  TrackResult res;
  SE3 rel = init_rel;
  AffineBrightness aff = init_affine;
  const double exposure = frame.exposure();
  for (int l = kPyramidLevels - 1; l >= 0; --l) {
    const ImageLevel& img = frame.pyramid.level(l);
    auto sys = detail::track_linearize(ref, l, img, exposure, rel, aff, cfg);
    if (sys.num_in < 10) continue;
    double lambda = 0.01;
    for (int it = 0; it < cfg.track_iterations[static_cast<std::size_t>(l)]; ++it) {
      Mat8d Hd = sys.H;
      for (int i = 0; i < 8; ++i) Hd(i, i) *= 1.0 + lambda;
      const Vec8d step = Hd.ldlt().solve(-sys.b);
      if (!step.allFinite()) break;
      const SE3 rel_new = SE3::exp(step.head<6>()) * rel;
      const AffineBrightness aff_new{aff.a + step[6], aff.b + step[7]};
      auto sys_new = detail::track_linearize(ref, l, img, exposure, rel_new, aff_new, cfg);
      if (sys_new.num_in >= 10 && sys_new.normalized() < sys.normalized()) {
        const double decrease = 1.0 - sys_new.normalized() / sys.normalized();
        rel = rel_new;
        aff = aff_new;
        sys = sys_new;
        lambda = std::max(lambda * 0.5, 1e-4);
        if (decrease < cfg.track_converged_rel) break;
        if (step.head<6>().norm() < 1e-6 && std::abs(step[6]) < 1e-6 && std::abs(step[7]) < 1e-4) break;
      } else {
        lambda *= 4;
        if (lambda > 1e4) break;
      }
    }
  }
  const auto fin = detail::track_linearize(ref, 0, frame.pyramid.level(0), exposure, rel, aff, cfg);
  res.rel = rel;
  res.affine = aff;
  res.num_points = fin.num_in;
  res.rmse = fin.num_in > 0 ? std::sqrt(fin.energy / (fin.num_in * kPatternSize)) : res.rmse;
  const double grad_rms = fin.num_in > 0 ? std::sqrt(fin.grad_sq / (fin.num_in * kPatternSize)) : 0.0;
  res.ok = fin.num_in >= cfg.track_min_points && res.rmse <= cfg.track_max_rmse && grad_rms >= cfg.track_min_gradient;
  return res;
}

// Tries the initial relative poses in order. Stops at the first successful
// alignment whose rmse is within track_accept_ratio of `last_rmse`; otherwise
// returns the best successful one, or a lost result.
inline TrackResult track_frame(const TrackingReference& ref, const Frame& frame, const std::vector<SE3>& inits,
                               const AffineBrightness& init_affine, const PipelineConfig& cfg,
                               double last_rmse = std::numeric_limits<double>::infinity()) {
  TrackResult best;
  for (std::size_t i = 0; i < inits.size(); ++i) {
    TrackResult r = align_frame(ref, frame, inits[i], init_affine, cfg);
    r.initializer = static_cast<int>(i);
    if (r.ok && (!best.ok || r.rmse < best.rmse)) best = r;
    if (!best.ok && best.initializer < 0) best = r;
    if (r.ok && r.rmse <= cfg.track_accept_ratio * last_rmse) return r;
  }
  return best;
}

// Initial guesses for the relative pose of frame n from the poses of frames
// n-1 and n-2: constant velocity, no motion, doubled and halved motion.
inline std::vector<SE3> motion_initializers(const SE3& ref_pose, const SE3& last_pose,
                                            const std::optional<SE3>& prev_pose) {
  const SE3 last_rel = last_pose * ref_pose.inverse();
  if (!prev_pose) return {last_rel};
  const SE3 motion = last_pose * prev_pose->inverse();
  const SE3 half = SE3::exp(0.5 * motion.log());
  return {motion * last_rel, last_rel, motion * motion * last_rel, half * last_rel, SE3()};
}

// ---------------------------------------------------------------------------
// Keyframe decision

struct FlowStats {
  double flow = 0;              // RMS pixel flow of the reference points
  double translation_flow = 0;  // RMS flow with the rotation removed
  double affine_change = 0;     // |log| of the brightness transfer scale
  int count = 0;
};

inline FlowStats flow_stats(const TrackingReference& ref, const SE3& rel, double exposure,
                            const AffineBrightness& affine) {
  FlowStats fs;
  const Mat3 R = rel.rotation();
  const Vec3& t = rel.translation();
  double sf = 0, st = 0;
  for (const auto& p : ref.levels[0]) {
    auto u = ref.camera.project(R * p.centre + t);
    auto ut = ref.camera.project(p.centre + t);
    if (!u || !ut) continue;
    sf += (*u - p.pixel).squaredNorm();
    st += (*ut - p.pixel).squaredNorm();
    ++fs.count;
  }
  if (fs.count > 0) {
    fs.flow = std::sqrt(sf / fs.count);
    fs.translation_flow = std::sqrt(st / fs.count);
  }
  fs.affine_change = std::abs(std::log(AffineTransfer{ref.exposure, exposure, ref.affine, affine}.scale()));
  return fs;
}

inline double keyframe_score(const FlowStats& fs, int width, int height, const PipelineConfig& cfg) {
  const double wh = static_cast<double>(width + height);
  return cfg.kf_flow_weight * fs.flow / wh + cfg.kf_translation_weight * fs.translation_flow / wh +
         cfg.kf_affine_weight * fs.affine_change;
}

inline bool need_keyframe(const FlowStats& fs, int width, int height, const PipelineConfig& cfg) {
  return keyframe_score(fs, width, height, cfg) > 1.0;
}

// ---------------------------------------------------------------------------
// Candidate selection

struct PixelSelection {
  std::vector<Vec2> pixels;
  int cell = 0;  // side of the cells holding at most one pixel each
};

// High-gradient pixels spread over the image: per 32x32 block a threshold of
// median gradient plus a constant, then at most the strongest pixel per cell,
// the cell size adapted toward `target` pixels.
inline PixelSelection select_pixels(const Frame& frame, const CameraModel& cam, int target,
                                    const PipelineConfig& cfg) {
  PixelSelection out;
  const ImageLevel& img = frame.pyramid.level(0);
  const int w = img.width(), h = img.height();
  const auto masks = level_masks(frame);
  std::vector<float> grad(static_cast<std::size_t>(w) * h, -1.f);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      if (usable_pixel(cam, masks[0], Vec2(x, y)))
        grad[static_cast<std::size_t>(y) * w + x] = std::sqrt(img.grad_sq(x, y));

  const int B = cfg.selection_block;
  const int bw = (w + B - 1) / B, bh = (h + B - 1) / B;
  std::vector<double> thr(static_cast<std::size_t>(bw) * bh, std::numeric_limits<double>::infinity());
  std::vector<float> vals;
  for (int by = 0; by < bh; ++by)
    for (int bx = 0; bx < bw; ++bx) {
      vals.clear();
      for (int y = by * B; y < std::min(h, (by + 1) * B); ++y)
        for (int x = bx * B; x < std::min(w, (bx + 1) * B); ++x) {
          const float g = grad[static_cast<std::size_t>(y) * w + x];
          if (g >= 0) vals.push_back(g);
        }
      if (vals.empty()) continue;
      auto mid = vals.begin() + static_cast<std::ptrdiff_t>(vals.size() / 2);
      std::nth_element(vals.begin(), mid, vals.end());
      thr[static_cast<std::size_t>(by) * bw + bx] = *mid;
    }
  // Smooth the block medians over their 3x3 neighbourhood.
  std::vector<double> sthr(thr.size(), std::numeric_limits<double>::infinity());
  for (int by = 0; by < bh; ++by)
    for (int bx = 0; bx < bw; ++bx) {
      double s = 0;
      int n = 0;
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          const int x = bx + dx, y = by + dy;
          if (x < 0 || y < 0 || x >= bw || y >= bh) continue;
          const double v = thr[static_cast<std::size_t>(y) * bw + x];
          if (std::isfinite(v)) {
            s += v;
            ++n;
          }
        }
      if (n) sthr[static_cast<std::size_t>(by) * bw + bx] = s / n + cfg.selection_threshold;
    }

  auto pick = [&](int cell) {
    std::vector<Vec2> sel;
    for (int cy = 0; cy < h; cy += cell)
      for (int cx = 0; cx < w; cx += cell) {
        float best = -1;
        int bxp = -1, byp = -1;
        for (int y = cy; y < std::min(h, cy + cell); ++y)
          for (int x = cx; x < std::min(w, cx + cell); ++x) {
            const float g = grad[static_cast<std::size_t>(y) * w + x];
            if (g < 0 || g <= sthr[static_cast<std::size_t>(y / B) * bw + x / B]) continue;
            if (g > best) {
              best = g;
              bxp = x;
              byp = y;
            }
          }
        if (bxp >= 0) sel.emplace_back(bxp, byp);
      }
    return sel;
  };

  int cell = std::max(1, static_cast<int>(std::lround(std::sqrt(double(w) * h / std::max(target, 1)) / 2)));
  for (int it = 0; it < 6; ++it) {
    out.pixels = pick(cell);
    out.cell = cell;
    const double n = static_cast<double>(out.pixels.size());
    if (n == 0 || target <= 0) break;
    const double ratio = n / target;
    if (ratio > 0.8 && ratio < 1.25) break;
    const int next = std::clamp(static_cast<int>(std::lround(cell * std::sqrt(ratio))), 1, 64);
    if (next == cell) break;
    cell = next;
  }
  if (target > 0 && out.pixels.size() > static_cast<std::size_t>(target)) {
    // Even thinning keeps the spatial spread of the row-major order.
    std::vector<Vec2> thin;
    const double stride = static_cast<double>(out.pixels.size()) / target;
    for (int i = 0; i < target; ++i) thin.push_back(out.pixels[static_cast<std::size_t>(i * stride)]);
    out.pixels = std::move(thin);
  }
  return out;
}

// An immature point: host pixel with an inverse-distance interval refined by
// epipolar searches in later frames.
struct Candidate {
  int host_kf = -1;
  HostPatch patch;
  double d_min = 0, d_max = 0;
  double inv_dist = 0;  // last match, valid once has_estimate
  bool has_estimate = false;
  MatchStatus last_status = MatchStatus::kDegenerate;
  double quality = 0;  // second-best / best energy of the last match
  double pixel_interval = std::numeric_limits<double>::infinity();
  int ambiguous_run = 0;
  int found = 0;
  bool dropped = false;

  const Vec2& pixel() const { return patch.pixel; }
  double sigma() const { return 0.5 * (d_max - d_min); }
};

inline std::vector<Candidate> select_candidates(int kf_id, const Frame& frame, const CameraModel& cam,
                                                const PipelineConfig& cfg) {
  std::vector<Candidate> out;
  const auto sel = select_pixels(frame, cam, cfg.candidate_count, cfg);
  for (const auto& px : sel.pixels) {
    auto patch = make_host_patch(frame.pyramid.level(0), px);
    if (!patch) continue;
    Candidate c;
    c.host_kf = kf_id;
    c.patch = *patch;
    c.d_min = 0;
    c.d_max = cfg.d_cap;
    out.push_back(c);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Candidate refinement

// One epipolar search of `c` in a new frame. Until the first match the
// search covers [0, kFirstSearchMaxInvDist] of the open interval.
inline MatchStatus refine_candidate(Candidate& c, const SE3& host_to_target, const ImageLevel& target,
                                    const AffineTransfer& affine, const CameraModel& cam, const PipelineConfig& cfg) {
  if (c.dropped) return c.last_status;
  const double hi = c.has_estimate ? c.d_max : std::min(c.d_max, kFirstSearchMaxInvDist);
  auto seg = make_segment(c.pixel(), host_to_target, c.d_min, hi, cam);
  if (!seg || seg->degenerate) {
    c.last_status = MatchStatus::kDegenerate;
    return c.last_status;
  }
  const auto m = search(*seg, c.patch, target, affine, cam, cfg.epipolar);
  c.last_status = m.status;
  switch (m.status) {
    case MatchStatus::kFound:
      c.d_min = m.new_d_min;
      c.d_max = std::max(m.new_d_max, m.new_d_min + 1e-9);
      c.inv_dist = m.d_refined;
      c.has_estimate = true;
      c.quality = m.second_best_ratio;
      c.pixel_interval = 2.0 * cfg.epipolar.sigma_scale * m.sigma_pixel;
      c.ambiguous_run = 0;
      ++c.found;
      break;
    case MatchStatus::kAmbiguous:
      if (++c.ambiguous_run >= cfg.max_ambiguous) c.dropped = true;
      break;
    case MatchStatus::kOutOfBounds:
      c.dropped = true;
      break;
    default:
      break;
  }
  return c.last_status;
}

// Refines every candidate hosted in the window against a tracked frame and
// removes dropped ones.
inline void refine_candidates(const Window& w, std::vector<Candidate>& cands, const Frame& frame, const SE3& pose,
                              const AffineBrightness& affine, const PipelineConfig& cfg) {
  for (auto& c : cands) {
    const int hi = w.index_of(c.host_kf);
    if (hi < 0) {
      c.dropped = true;
      continue;
    }
    const auto& host = w.keyframes()[static_cast<std::size_t>(hi)];
    if (host.frame.get() == &frame) continue;
    const AffineTransfer tr{host.exposure(), frame.exposure(), host.affine, affine};
    refine_candidate(c, relative_pose(host.pose, pose), frame.pyramid.level(0), tr, w.camera(), cfg);
  }
  std::erase_if(cands, [](const Candidate& c) { return c.dropped; });
}

inline bool candidate_converged(const Candidate& c, const PipelineConfig& cfg) {
  return c.has_estimate && c.last_status == MatchStatus::kFound && c.inv_dist > 0 &&
         c.pixel_interval < cfg.activation_max_interval_px && c.quality >= cfg.activation_min_quality &&
         c.sigma() <= cfg.activation_max_rel_sigma * c.inv_dist;
}

// ---------------------------------------------------------------------------
// Marginalization policy

// Centre distance between two world-to-camera poses.
inline double pose_distance(const SE3& a, const SE3& b) { return relative_pose(a, b).translation().norm(); }

// Redundancy of keyframe `i` among the `keep` frames with respect to the
// latest one; the largest value is dropped first.
inline double distance_score(const Window& w, int i, const std::vector<int>& keep) {
  const auto& kfs = w.keyframes();
  const SE3& Ti = kfs[static_cast<std::size_t>(i)].pose;
  double sum = 0;
  for (int k : keep) {
    if (k == i) continue;
    sum += 1.0 / (pose_distance(Ti, kfs[static_cast<std::size_t>(k)].pose) + 1e-5);
  }
  return std::sqrt(pose_distance(Ti, kfs.back().pose)) * sum;
}

// Keyframe ids to marginalize: never the latest two; frames whose hosted
// points are mostly marginalized; then the most redundant frames until at
// most N_f remain.
inline std::vector<int> marginalize_policy(const Window& w, const PipelineConfig& cfg) {
  std::vector<int> drop;
  const int n = w.size();
  if (n <= 2) return drop;
  const auto& kfs = w.keyframes();
  std::vector<int> keep;
  for (int i = 0; i < n; ++i) {
    const auto& kf = kfs[static_cast<std::size_t>(i)];
    const int active = static_cast<int>(kf.points.size());
    const int total = active + kf.points_marginalized;
    if (i < n - 2 && total > 0 && static_cast<double>(active) / total < cfg.visibility_min)
      drop.push_back(kf.kf_id);
    else
      keep.push_back(i);
  }
  while (static_cast<int>(keep.size()) > cfg.nf) {
    int worst = -1;
    double worst_score = -1;
    for (int i : keep) {
      if (i >= n - 2) continue;
      const double s = distance_score(w, i, keep);
      if (s > worst_score) {
        worst_score = s;
        worst = i;
      }
    }
    if (worst < 0) break;
    drop.push_back(kfs[static_cast<std::size_t>(worst)].kf_id);
    std::erase(keep, worst);
  }
  return drop;
}

// Active points hosted outside the latest two keyframes with no active
// residual toward either of them, as (host index, point index).
inline std::vector<std::pair<int, int>> points_to_marginalize(const Window& w) {
  std::vector<std::pair<int, int>> out;
  const int n = w.size();
  if (n < 3) return out;
  const int l1 = w.keyframes()[static_cast<std::size_t>(n - 1)].kf_id;
  const int l2 = w.keyframes()[static_cast<std::size_t>(n - 2)].kf_id;
  for (int hi = 0; hi < n - 2; ++hi) {
    const auto& pts = w.keyframes()[static_cast<std::size_t>(hi)].points;
    for (int pi = 0; pi < static_cast<int>(pts.size()); ++pi) {
      bool seen = false;
      for (const auto& r : pts[static_cast<std::size_t>(pi)].residuals)
        if ((r.target_kf == l1 || r.target_kf == l2) && r.state == ResidualState::kActive) seen = true;
      if (!seen) out.emplace_back(hi, pi);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Candidate activation

// Projections of the window's active points into its latest keyframe.
inline std::vector<DepthSample> window_depth_map(const Window& w) {
  std::vector<DepthSample> out;
  if (w.size() == 0) return out;
  const auto& latest = w.keyframes().back();
  const auto& cam = w.camera();
  for (const auto& host : w.keyframes()) {
    const SE3 rel = relative_pose(host.pose, latest.pose);
    for (const auto& p : host.points) {
      auto X = cam.unproject(p.patch.pixel, p.inv_dist);
      if (!X) continue;
      const Vec3 Xl = rel * *X;
      if (!is_in_fov(Xl, cam)) continue;
      auto u = cam.project(Xl);
      out.push_back({*u, 1.0 / Xl.norm()});
    }
  }
  return out;
}

// Promotes converged candidates to active points, at most one per cell of an
// occupancy grid over the latest keyframe that already holds the projections
// of active points, until the activation target is reached. Returns the
// number of activated points.
inline int activate_candidates(Window& w, std::vector<Candidate>& cands, const PipelineConfig& cfg) {
  if (w.size() < 2) return 0;
  int budget = cfg.activation_target - w.num_active_points();
  if (budget <= 0) return 0;
  const auto& cam = w.camera();
  const int W = cam.width, H = cam.height;
  const double cell = std::max(2.0, std::sqrt(double(W) * H / std::max(cfg.activation_target, 1)));
  const int gw = static_cast<int>(std::ceil(W / cell)), gh = static_cast<int>(std::ceil(H / cell));
  std::vector<std::uint8_t> occ(static_cast<std::size_t>(gw) * gh, 0);
  auto cell_of = [&](const Vec2& u) {
    const int x = std::clamp(static_cast<int>(u.x() / cell), 0, gw - 1);
    const int y = std::clamp(static_cast<int>(u.y() / cell), 0, gh - 1);
    return static_cast<std::size_t>(y) * gw + x;
  };
  for (const auto& s : window_depth_map(w)) occ[cell_of(s.pixel)] = 1;

  const SE3 latest = w.keyframes().back().pose;
  std::vector<std::size_t> order;
  std::vector<std::size_t> cell_idx(cands.size(), 0);
  for (std::size_t i = 0; i < cands.size(); ++i) {
    auto& c = cands[i];
    if (w.index_of(c.host_kf) < 0) {
      c.dropped = true;
      continue;
    }
    if (!c.has_estimate) continue;
    auto X = cam.unproject(c.pixel(), c.inv_dist);
    const Vec3 Xl = relative_pose(w.keyframe(c.host_kf).pose, latest) * *X;
    if (!is_in_fov(Xl, cam)) {
      // Converged points that left the newest keyframe can no longer be
      // activated with a useful spread.
      c.dropped = true;
      continue;
    }
    if (!candidate_converged(c, cfg)) continue;
    cell_idx[i] = cell_of(*cam.project(Xl));
    order.push_back(i);
  }
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return cands[a].quality > cands[b].quality; });
  int activated = 0;
  for (std::size_t i : order) {
    if (activated >= budget) break;
    if (occ[cell_idx[i]]) continue;
    auto& c = cands[i];
    if (w.add_point(c.host_kf, c.patch, c.inv_dist)) {
      occ[cell_idx[i]] = 1;
      ++activated;
    }
    c.dropped = true;
  }
  std::erase_if(cands, [](const Candidate& c) { return c.dropped; });
  return activated;
}

// ---------------------------------------------------------------------------
// Two-frame initializer

struct BootstrapPoint {
  Vec2 pixel;
  double inv_dist = 1;
  double iR = 1;  // smoothed neighbour value used as regularization target
  std::vector<int> neighbours;
  struct Level {
    bool valid = false;
    std::array<Vec3, kPatternSize> ray;
    std::array<double, kPatternSize> intensity{}, weight{};
  };
  std::array<Level, kPyramidLevels> levels;
  bool good = false;  // in bounds and below the cutoff at level 0
  double energy = 0;
};

struct BootstrapResult {
  bool success = false;
  bool snapped = false;  // translation large enough to release the distance prior
  SE3 rel;               // first camera -> current camera
  AffineBrightness affine;
  double rmse = std::numeric_limits<double>::infinity();
  double translation_flow = 0;
  int good_points = 0;
};

// Joint coarse-to-fine estimation of the relative pose and per-point inverse
// distances of the first frame. Until the translation is significant the
// distances are pulled to 1 and the translation to 0, which keeps the
// rotation estimate stable; afterwards each distance is only weakly coupled
// to its neighbours.
class Bootstrapper {
 public:
  Bootstrapper(const CameraModel& cam, const PipelineConfig& cfg) : cam_(cam), cfg_(cfg) {}

  bool has_first() const { return first_ != nullptr; }
  const std::shared_ptr<const Frame>& first() const { return first_; }
  const std::vector<BootstrapPoint>& points() const { return points_; }
  const SE3& rel() const { return rel_; }
  int frames_tried() const { return tried_; }

  void reset(std::shared_ptr<const Frame> first) {
    first_ = std::move(first);
    points_.clear();
    rel_ = SE3();
    affine_ = {};
    snapped_ = false;
    tried_ = 0;
    const auto masks = level_masks(*first_);
    const auto sel = select_pixels(*first_, cam_, cfg_.bootstrap_points, cfg_);
    for (const auto& px : sel.pixels) {
      BootstrapPoint p;
      p.pixel = px;
      for (int l = 0; l < kPyramidLevels; ++l) {
        const CameraModel cl = cam_.at_level(l);
        const ImageLevel& img = first_->pyramid.level(l);
        const double s = 1.0 / (1 << l);
        const Vec2 ul = (px + Vec2(0.5, 0.5)) * s - Vec2(0.5, 0.5);
        auto& L = p.levels[static_cast<std::size_t>(l)];
        L.valid = mask_ok(masks[static_cast<std::size_t>(l)], img.width(), img.height(), ul, 3);
        for (int k = 0; k < kPatternSize && L.valid; ++k) {
          const Vec2 q = ul + Vec2(kResidualPattern[k][0], kResidualPattern[k][1]);
          auto r = cl.unit_ray(q);
          auto v = interp(img, q);
          if (!r || !v || !cl.within_angle(*r)) {
            L.valid = false;
            break;
          }
          L.ray[k] = *r;
          L.intensity[k] = v->value;
          L.weight[k] = gradient_weight(v->gx, v->gy);
        }
      }
      if (p.levels[0].valid) points_.push_back(std::move(p));
    }
    // Ten nearest neighbours in the image for the smoothness coupling.
    const int n = static_cast<int>(points_.size());
    std::vector<std::pair<double, int>> dist;
    for (int i = 0; i < n; ++i) {
      dist.clear();
      for (int j = 0; j < n; ++j)
        if (j != i) dist.emplace_back((points_[i].pixel - points_[j].pixel).squaredNorm(), j);
      const auto k = std::min<std::size_t>(10, dist.size());
      std::partial_sort(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(k), dist.end());
      for (std::size_t m = 0; m < k; ++m) points_[i].neighbours.push_back(dist[m].second);
    }
  }

  // Continues the estimate with a new frame. On success the distances are
  // normalized to mean 1 and the translation rescaled accordingly.
  BootstrapResult add(const Frame& frame) {
    BootstrapResult res;
    if (!first_) return res;
    ++tried_;
    if (points_.size() < 50) return res;
    for (int l = kPyramidLevels - 1; l >= 0; --l) optimize_level(frame, l);

    const auto fin = linearize(frame, 0, rel_, affine_, false);
    res.rel = rel_;
    res.affine = affine_;
    res.snapped = snapped_;
    res.good_points = fin.num_good;
    res.rmse = fin.num_good > 0 ? std::sqrt(fin.photometric / (fin.num_good * kPatternSize)) : res.rmse;
    double st = 0;
    int n = 0;
    for (const auto& p : points_) {
      if (!p.good) continue;
      auto X = cam_.unproject(p.pixel, p.inv_dist);
      auto u = X ? cam_.project(*X + rel_.translation()) : std::nullopt;
      if (!u) continue;
      st += (*u - p.pixel).squaredNorm();
      ++n;
    }
    res.translation_flow = n > 0 ? std::sqrt(st / n) : 0;
    res.success = snapped_ && res.translation_flow >= cfg_.bootstrap_min_flow && res.rmse <= cfg_.bootstrap_max_rmse &&
                  fin.num_good >= static_cast<int>(points_.size() / 2);
    if (res.success) {
      double mean = 0;
      int m = 0;
      for (const auto& p : points_)
        if (p.good) {
          mean += p.inv_dist;
          ++m;
        }
      mean /= std::max(m, 1);
      for (auto& p : points_) p.inv_dist /= mean;
      rel_.translation() *= mean;
      scale_ = mean;
      res.rel = rel_;
    }
    return res;
  }

  // Factor the last successful add() divided the inverse distances by and
  // multiplied the translation by.
  double normalization() const { return scale_; }

 private:
  struct Lin {
    Mat8d H = Mat8d::Zero();
    Vec8d b = Vec8d::Zero();
    std::vector<Vec8d> h_fd;
    std::vector<double> h_dd, b_d;
    double photometric = 0;
    double energy = 0;  // photometric + regularization
    int num_good = 0;
    bool alpha_on = true;
  };

  Lin linearize(const Frame& frame, int level, const SE3& rel, const AffineBrightness& aff, bool with_jac,
                const std::vector<double>* dist = nullptr) {
    Lin L;
    const std::size_t np = points_.size();
    L.h_fd.assign(np, Vec8d::Zero());
    L.h_dd.assign(np, 0.0);
    L.b_d.assign(np, 0.0);
    const CameraModel cl = cam_.at_level(level);
    const ImageLevel& img = frame.pyramid.level(level);
    const Mat3 R = rel.rotation();
    const Vec3& t = rel.translation();
    const AffineTransfer tr{first_->exposure(), frame.exposure(), {}, aff};
    const double scale = tr.scale();
    const double gamma = cfg_.residual.huber_threshold;
    const double cutoff = cfg_.track_point_cutoff;
    const bool record = level == 0;

    Eigen::Matrix<double, kPatternSize, 8> J;
    Vec8d Jd, r, wr;
    int n_valid = 0;
    double dev = 0;
    for (std::size_t i = 0; i < np; ++i) {
      auto& p = points_[i];
      const double d = dist ? (*dist)[i] : p.inv_dist;
      const auto& lv = p.levels[static_cast<std::size_t>(level)];
      if (record) p.good = false;
      if (!lv.valid) continue;
      ++n_valid;
      dev += (d - 1) * (d - 1);
      double e = 0;
      bool ok = true;
      for (int k = 0; k < kPatternSize; ++k) {
        const Vec3 Rr = R * lv.ray[k];
        const Vec3 Xt = Rr / d + t;
        if (!cl.within_angle(Xt)) {
          ok = false;
          break;
        }
        auto u = omni_project(Xt, cl.intrinsics);
        if (!u || !cl.in_image(*u, 1.0)) {
          ok = false;
          break;
        }
        auto s = interp(img, *u);
        auto Jp = omni_project_jacobian(Xt, cl.intrinsics);
        if (!s || !Jp) {
          ok = false;
          break;
        }
        const double res = tr.residual(s->value, lv.intensity[k]);
        const double hw = huber_weight(res, gamma);
        e += lv.weight[k] * hw * (2.0 - hw) * res * res;
        if (!with_jac) continue;
        const Eigen::RowVector3d gJ = Eigen::RowVector2d(s->gx, s->gy) * *Jp;
        J.block<1, 3>(k, 0) = gJ;
        J.block<1, 3>(k, 3) = -gJ * hat(Xt);
        J(k, 6) = -scale * lv.intensity[k];
        J(k, 7) = -1.0;
        Jd[k] = -gJ.dot(Rr) / (d * d);
        r[k] = res;
        wr[k] = lv.weight[k] * hw;
      }
      if (!ok || e > cutoff) {
        L.energy += cutoff;
        continue;
      }
      if (record) {
        p.good = true;
        p.energy = e;
      }
      ++L.num_good;
      L.photometric += e;
      L.energy += e;
      if (!with_jac) continue;
      L.H.noalias() += J.transpose() * wr.asDiagonal() * J;
      L.b.noalias() += J.transpose() * wr.cwiseProduct(r);
      L.h_fd[i] = J.transpose() * wr.cwiseProduct(Jd);
      L.h_dd[i] = Jd.dot(wr.cwiseProduct(Jd));
      L.b_d[i] = Jd.dot(wr.cwiseProduct(r));
    }

    // Distance / translation regularization.
    const double n = std::max(n_valid, 1);
    const double alpha_energy = cfg_.bootstrap_alpha_w * (dev + t.squaredNorm() * n);
    L.alpha_on = alpha_energy <= cfg_.bootstrap_alpha_k * n;
    if (L.alpha_on) {
      L.energy += alpha_energy;
      const double aw = cfg_.bootstrap_alpha_w;
      L.H.block<3, 3>(0, 0) += aw * n * Mat3::Identity();
      L.b.head<3>() += aw * n * t;
      for (std::size_t i = 0; i < np; ++i) {
        if (!points_[i].levels[static_cast<std::size_t>(level)].valid) continue;
        const double d = dist ? (*dist)[i] : points_[i].inv_dist;
        L.h_dd[i] += aw;
        L.b_d[i] += aw * (d - 1);
      }
    } else {
      L.energy += cfg_.bootstrap_alpha_k * n;
      const double cw = cfg_.bootstrap_coupling_w;
      for (std::size_t i = 0; i < np; ++i) {
        if (!points_[i].levels[static_cast<std::size_t>(level)].valid) continue;
        const double d = dist ? (*dist)[i] : points_[i].inv_dist;
        L.energy += cw * (d - points_[i].iR) * (d - points_[i].iR);
        L.h_dd[i] += cw;
        L.b_d[i] += cw * (d - points_[i].iR);
      }
    }
    const double wa = cfg_.optimizer.affine_prior_a, wb = cfg_.optimizer.affine_prior_b;
    L.energy += wa * aff.a * aff.a + wb * aff.b * aff.b;
    L.H(6, 6) += wa;
    L.b(6) += wa * aff.a;
    L.H(7, 7) += wb;
    L.b(7) += wb * aff.b;
    return L;
  }

  void update_smoothing() {
    std::vector<double> nb;
    for (auto& p : points_) {
      nb.clear();
      for (int j : p.neighbours) nb.push_back(points_[static_cast<std::size_t>(j)].inv_dist);
      if (nb.empty()) {
        p.iR = p.inv_dist;
        continue;
      }
      auto mid = nb.begin() + static_cast<std::ptrdiff_t>(nb.size() / 2);
      std::nth_element(nb.begin(), mid, nb.end());
      p.iR = 0.2 * p.inv_dist + 0.8 * *mid;
    }
  }

  void optimize_level(const Frame& frame, int level) {
    const std::size_t np = points_.size();
    double lambda = 0.1;
    Lin L = linearize(frame, level, rel_, affine_, true);
    for (int it = 0; it < cfg_.bootstrap_iterations[static_cast<std::size_t>(level)]; ++it) {
      Mat8d Hsc = L.H;
      Vec8d bsc = L.b;
      for (int i = 0; i < 8; ++i) Hsc(i, i) *= 1.0 + lambda;
      std::vector<double> hdd(np);
      for (std::size_t i = 0; i < np; ++i) {
        hdd[i] = L.h_dd[i] * (1.0 + lambda);
        if (hdd[i] <= 0) continue;
        Hsc.noalias() -= L.h_fd[i] * L.h_fd[i].transpose() / hdd[i];
        bsc.noalias() -= L.h_fd[i] * L.b_d[i] / hdd[i];
      }
      const Vec8d step = Hsc.ldlt().solve(-bsc);
      if (!step.allFinite()) break;
      std::vector<double> d_new(np);
      for (std::size_t i = 0; i < np; ++i) {
        double dd = hdd[i] > 0 ? -(L.b_d[i] + L.h_fd[i].dot(step)) / hdd[i] : 0.0;
        d_new[i] = std::clamp(points_[i].inv_dist + dd, 1e-3, 50.0);
      }
      const SE3 rel_new = SE3::exp(step.head<6>()) * rel_;
      const AffineBrightness aff_new{affine_.a + step[6], affine_.b + step[7]};
      const Lin Lt = linearize(frame, level, rel_new, aff_new, false, &d_new);
      if (Lt.energy < L.energy) {
        rel_ = rel_new;
        affine_ = aff_new;
        for (std::size_t i = 0; i < np; ++i) points_[i].inv_dist = d_new[i];
        if (!Lt.alpha_on) update_smoothing();
        L = linearize(frame, level, rel_, affine_, true);
        lambda = std::max(lambda * 0.5, 1e-4);
        if (step.norm() < 1e-6) break;
      } else {
        lambda *= 4;
        if (lambda > 1e4) break;
      }
    }
    if (level == 0) snapped_ = !L.alpha_on;
  }

  CameraModel cam_;
  PipelineConfig cfg_;
  std::shared_ptr<const Frame> first_;
  std::vector<BootstrapPoint> points_;
  SE3 rel_;
  AffineBrightness affine_;
  bool snapped_ = false;
  int tried_ = 0;
  double scale_ = 1;
};

}  // namespace omnivo
