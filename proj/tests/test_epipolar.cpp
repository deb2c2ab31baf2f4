#include <gtest/gtest.h>

#include <random>

#include "omnivo/epipolar.hpp"
#include "scene_support.hpp"
#include "test_support.hpp"

using namespace omnivo;
using namespace omnivo::testing;

namespace {

CameraModel pinhole_as_omni() { return CameraModel::omni({250, 250, 239.5, 239.5, 0.0}, 480, 480); }

Vec2 random_pixel(std::mt19937& rng, double lo = 60, double hi = 420) {
  std::uniform_real_distribution<double> u(lo, hi);
  return Vec2(u(rng), u(rng));
}

// Signed distance of x from the line through a and b.
double line_distance(const Vec2& a, const Vec2& b, const Vec2& x) {
  const Vec2 d = (b - a).normalized();
  return d.x() * (x - a).y() - d.y() * (x - a).x();
}

Image stripes(int w, int h, double period) {
  Image img(w, h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) img(x, y) = static_cast<float>(128 + 60 * std::sin(2 * kPi * x / period));
  return img;
}

}  // namespace

TEST(EpiSegment, PureRotationIsDegenerate) {
  const auto cam = fisheye185();
  Vec6 xi;
  xi << 0, 0, 0, 0.1, -0.2, 0.05;
  auto seg = make_segment(Vec2(200, 260), SE3::exp(xi), 0.0, 10.0, cam);
  ASSERT_TRUE(seg);
  EXPECT_TRUE(seg->degenerate);

  const ImageLevel lvl(textured_image(480, 480));
  const auto patch = *make_host_patch(lvl, Vec2(200, 260));
  const auto m = search(*seg, patch, lvl, {}, cam);
  EXPECT_EQ(m.status, MatchStatus::kDegenerate);
  EXPECT_EQ(m.new_d_min, 0.0);
  EXPECT_EQ(m.new_d_max, 10.0);
}

TEST(EpiSegment, IdentityPoseIsDegenerate) {
  const auto cam = fisheye185();
  auto seg = make_segment(Vec2(240, 240), SE3(), 0.0, 10.0, cam);
  ASSERT_TRUE(seg);
  EXPECT_TRUE(seg->degenerate);
}

TEST(EpiSegment, FarEndAtZeroInverseDistanceIsRotatedRay) {
  std::mt19937 rng(1);
  const auto cam = fisheye185();
  for (int i = 0; i < 200; ++i) {
    const SE3 rel = random_pose(rng, 0.3, 0.5);
    const Vec2 px = random_pixel(rng);
    auto seg = make_segment(px, rel, 0.0, 1.0, cam);
    ASSERT_TRUE(seg);
    const Vec3 expected = (rel.rotation() * *cam.unit_ray(px)).normalized();
    EXPECT_LT((seg->p0 - expected).norm(), 1e-12);
    // Another translation gives the same far end.
    const SE3 other(rel.unit_quaternion(), rel.translation() * 3 + Vec3(0.1, 0, 0));
    EXPECT_LT((make_segment(px, other, 0.0, 1.0, cam)->p0 - expected).norm(), 1e-12);
  }
}

TEST(EpiSegment, LateralTranslationHandExample) {
  const auto cam = fisheye185();
  const SE3 rel(Mat3::Identity(), Vec3(0.1, 0, 0));
  auto seg = make_segment(Vec2(239.5, 239.5), rel, 0.5, 2.0, cam);
  ASSERT_TRUE(seg);
  ASSERT_FALSE(seg->degenerate);
  // Host ray (0,0,1); points at distance 2 and 0.5 m seen from x = -0.1.
  EXPECT_LT((seg->p0 - Vec3(0.05, 0, 1).normalized()).norm(), 1e-12);
  EXPECT_LT((seg->p_inf - Vec3(0.2, 0, 1).normalized()).norm(), 1e-12);
  EXPECT_GT(seg->p0.x(), 0);
  EXPECT_GT(seg->p_inf.x(), seg->p0.x());
}

TEST(EpiSegment, EndpointsAreUnitAndIntervalOrdered) {
  std::mt19937 rng(2);
  const auto cam = fisheye185();
  std::uniform_real_distribution<double> d(0.0, 3.0);
  for (int i = 0; i < 500; ++i) {
    const double a = d(rng), b = a + 0.01 + d(rng);
    auto seg = make_segment(random_pixel(rng, 5, 475), random_pose(rng, 0.3, 0.3), a, b, cam);
    ASSERT_TRUE(seg);
    EXPECT_NEAR(seg->p0.norm(), 1.0, 1e-9);
    EXPECT_NEAR(seg->p_inf.norm(), 1.0, 1e-9);
    EXPECT_LE(0.0, seg->d_min);
    EXPECT_LT(seg->d_min, seg->d_max);
    EXPECT_LE(angle_between(seg->p0, seg->p_inf), kMaxSegmentAngle + 1e-9);
  }
}

TEST(EpiSegment, LongSegmentsAreTruncatedAtNearEnd) {
  const auto cam = fisheye185();
  // Translation partly against the ray: near points end up behind the target.
  const SE3 rel(Mat3::Identity(), Vec3(0.5, 0, -0.2));
  auto seg = make_segment(Vec2(239.5, 239.5), rel, 0.0, 100.0, cam);
  ASSERT_TRUE(seg);
  EXPECT_TRUE(seg->truncated);
  EXPECT_NEAR(angle_between(seg->p0, seg->p_inf), kMaxSegmentAngle, 1e-9);
  EXPECT_LT((seg->p0 - Vec3(0, 0, 1)).norm(), 1e-12);
  EXPECT_LT(seg->d_max, 100.0);
}

TEST(EpiSegment, InverseDistanceMatchesChordDirection) {
  std::mt19937 rng(3);
  const auto cam = fisheye185();
  for (int i = 0; i < 200; ++i) {
    auto seg = make_segment(random_pixel(rng), random_pose(rng, 0.2, 0.3), 0.2, 3.0, cam);
    ASSERT_TRUE(seg && !seg->degenerate);
    EXPECT_NEAR(seg->inv_dist(0.0), seg->d_max, 1e-12);
    EXPECT_NEAR(seg->inv_dist(1.0), seg->d_min, 1e-12);
    for (double a : {0.1, 0.37, 0.5, 0.9}) {
      const double d = seg->inv_dist(a);
      // The sphere point of d points along the chord point.
      EXPECT_LT((seg->ray_point(d).normalized() - seg->point(a).normalized()).norm(), 1e-10);
      EXPECT_NEAR(seg->alpha_of(d), a, 1e-10);
    }
  }
}

TEST(EpiCurve, EndpointsProjectSphereEnds) {
  std::mt19937 rng(4);
  const auto cam = fisheye185();
  auto seg = make_segment(Vec2(150, 300), random_pose(rng, 0.1, 0.2), 0.3, 2.0, cam);
  ASSERT_TRUE(seg);
  EXPECT_LT((*curve_point(*seg, 0.0, cam) - *cam.project(seg->p_inf)).norm(), 1e-9);
  EXPECT_LT((*curve_point(*seg, 1.0, cam) - *cam.project(seg->p0)).norm(), 1e-9);
}

TEST(EpiCurve, PinholeCurveIsTheEpipolarLine) {
  std::mt19937 rng(5);
  const auto cam = pinhole_as_omni();
  for (int i = 0; i < 100; ++i) {
    const SE3 rel = random_pose(rng, 0.05, 0.2);
    const Vec2 px = random_pixel(rng, 150, 330);
    auto seg = make_segment(px, rel, 0.3, 1.5, cam);
    ASSERT_TRUE(seg && !seg->degenerate);
    // Epipolar line from the essential matrix E = [t]x R.
    const Mat3 E = hat(rel.translation()) * rel.rotation();
    const Vec3 xh((px.x() - 239.5) / 250, (px.y() - 239.5) / 250, 1);
    const Vec3 l = E * xh;
    for (double a = 0; a <= 1.0; a += 0.05) {
      auto u = curve_point(*seg, a, cam);
      if (!u) continue;
      const Vec3 xt((u->x() - 239.5) / 250, (u->y() - 239.5) / 250, 1);
      EXPECT_LT(std::abs(l.dot(xt)) / l.head<2>().norm() * 250, 1e-6);
    }
  }
}

TEST(EpiCurve, PinholeCurvePointsAreCollinear) {
  std::mt19937 rng(6);
  const auto cam = pinhole_as_omni();
  for (int i = 0; i < 50; ++i) {
    auto seg = make_segment(random_pixel(rng, 150, 330), random_pose(rng, 0.05, 0.2), 0.3, 1.5, cam);
    ASSERT_TRUE(seg && !seg->degenerate);
    const Vec2 a = *curve_point(*seg, 0.0, cam), b = *curve_point(*seg, 1.0, cam);
    for (double t = 0.1; t < 1.0; t += 0.1) EXPECT_LT(std::abs(line_distance(a, b, *curve_point(*seg, t, cam))), 1e-6);
  }
}

TEST(EpiCurve, OmniCurveBendsAwayFromTheChord) {
  const auto cam = fisheye185();
  const SE3 rel(Mat3::Identity(), Vec3(0.1, 0, 0));
  auto seg = make_segment(Vec2(120, 100), rel, 0.2, 5.0, cam);
  ASSERT_TRUE(seg && !seg->degenerate);
  const Vec2 a = *curve_point(*seg, 0.0, cam), b = *curve_point(*seg, 1.0, cam);
  double worst = 0;
  for (double t = 0.1; t < 1.0; t += 0.1) worst = std::max(worst, std::abs(line_distance(a, b, *curve_point(*seg, t, cam))));
  EXPECT_GT(worst, 0.1);
}

TEST(EpiCurve, RenderedCorrespondenceLiesOnCurve) {
  const auto pair = rendered_lateral_pair();
  int checked = 0;
  for (int y = 40; y < 440; y += 37)
    for (int x = 40; x < 440; x += 37) {
      const double d = pair.host.inv_dist_at(x, y);
      ASSERT_GT(d, 0);
      auto seg = make_segment(Vec2(x, y), pair.host_to_target, 0.0, 10.0, pair.cam);
      ASSERT_TRUE(seg);
      if (seg->degenerate || d > seg->d_max) continue;
      const Vec3 X = pair.host_to_target * *pair.cam.unproject(Vec2(x, y), d);
      if (!pair.cam.within_angle(X)) continue;  // left the target field of view
      auto on_curve = curve_point(*seg, seg->alpha_of(d), pair.cam);
      auto truth = pair.cam.project(X);
      ASSERT_TRUE(on_curve && truth);
      EXPECT_LT((*on_curve - *truth).norm(), 0.5);
      ++checked;
    }
  EXPECT_GT(checked, 50);
}

TEST(AlphaStep, StepsAreAboutOnePixel) {
  std::mt19937 rng(7);
  const auto cam = fisheye185();
  int in_range = 0, total = 0;
  for (int i = 0; i < 100; ++i) {
    auto seg = make_segment(random_pixel(rng, 20, 460), random_pose(rng, 0.1, 0.2), 0.0, 10.0, cam);
    ASSERT_TRUE(seg);
    if (seg->degenerate) continue;
    double a = 0;
    auto prev = curve_point(*seg, a, cam);
    while (a < 1.0) {
      a += alpha_step(*seg, a, cam);
      if (a > 1.0) break;
      auto cur = curve_point(*seg, a, cam);
      if (prev && cur) {
        const double dist = (*cur - *prev).norm();
        in_range += dist >= 0.5 && dist <= 2.0;
        ++total;
      }
      prev = cur;
    }
  }
  ASSERT_GT(total, 1000);
  EXPECT_GE(static_cast<double>(in_range) / total, 0.95);
}

TEST(AlphaStep, DoublingFocalLengthHalvesStep) {
  std::mt19937 rng(8);
  auto cam = fisheye185();
  for (int i = 0; i < 50; ++i) {
    const Vec2 px = random_pixel(rng);
    const SE3 rel = random_pose(rng, 0.1, 0.2);
    auto seg = make_segment(px, rel, 0.2, 2.0, cam);
    ASSERT_TRUE(seg && !seg->degenerate);
    // Same sphere segment, camera with twice the focal length.
    auto cam2 = cam;
    cam2.intrinsics.fx *= 2;
    cam2.intrinsics.fy *= 2;
    cam2.width = cam2.height = 4000;
    for (double a : {0.0, 0.3, 0.8}) EXPECT_NEAR(alpha_step(*seg, a, cam2), 0.5 * alpha_step(*seg, a, cam), 1e-12);
  }
}

TEST(AlphaStep, PinholeStepIsNearlyConstant) {
  const auto cam = pinhole_as_omni();
  const SE3 rel(Mat3::Identity(), Vec3(0.1, 0.02, 0));
  auto seg = make_segment(Vec2(230, 250), rel, 0.5, 0.6, cam);
  ASSERT_TRUE(seg && !seg->degenerate);
  const double first = alpha_step(*seg, 0.0, cam);
  for (double a = 0; a <= 1.0; a += 0.05) EXPECT_NEAR(alpha_step(*seg, a, cam) / first, 1.0, 0.1);
}

TEST(AlphaStep, StationaryCurveFallsBack) {
  const auto cam = fisheye185();
  EpiSegment seg;
  seg.p0 = seg.p_inf = Vec3(0, 0, 1);
  EXPECT_EQ(alpha_step(seg, 0.5, cam), kFallbackAlphaStep);
}

TEST(EpipolarSearch, RecoversRenderedLateralPair) {
  const auto pair = rendered_lateral_pair();
  const ImageLevel host(pair.host.image), target(pair.target.image);
  int candidates = 0, accurate = 0;
  for (int y = 10; y < 470; y += 7)
    for (int x = 10; x < 470; x += 7) {
      auto patch = make_host_patch(host, Vec2(x, y));
      if (!patch) continue;
      auto seg = make_segment(Vec2(x, y), pair.host_to_target, kFirstSearchMinInvDist, kFirstSearchMaxInvDist, pair.cam);
      ASSERT_TRUE(seg);
      if (seg->degenerate) continue;
      const double gt = pair.host.inv_dist_at(x, y);
      auto along = true_epipolar_gradient(*seg, *patch, gt, target, pair.cam);
      if (!along || *along < 8 * 16) continue;
      ++candidates;
      const auto m = search(*seg, *patch, target, {}, pair.cam);
      accurate += m.status == MatchStatus::kFound && std::abs(m.d_refined - gt) < 0.01 * gt;
    }
  ASSERT_GT(candidates, 1000);
  EXPECT_GE(static_cast<double>(accurate) / candidates, 0.9) << accurate << " of " << candidates;
}

TEST(EpipolarSearch, FoundDistanceReprojectsOntoMatch) {
  const auto pair = rendered_lateral_pair();
  const ImageLevel host(pair.host.image), target(pair.target.image);
  int found = 0;
  for (int y = 20; y < 460; y += 11)
    for (int x = 20; x < 460; x += 11) {
      auto patch = make_host_patch(host, Vec2(x, y));
      if (!patch) continue;
      auto seg = make_segment(Vec2(x, y), pair.host_to_target, 0.0, 10.0, pair.cam);
      const auto m = search(*seg, *patch, target, {}, pair.cam);
      if (m.status != MatchStatus::kFound) continue;
      ++found;
      EXPECT_GE(m.d_refined, seg->d_min);
      EXPECT_LE(m.d_refined, seg->d_max);
      EXPECT_GT(m.second_best_ratio, 1.0 / EpipolarConfig{}.ambiguity_ratio);
      const Vec2 u = *pair.cam.project(pair.host_to_target * *pair.cam.unproject(Vec2(x, y), m.d_refined));
      EXPECT_LT((u - m.pixel).norm(), 0.5);
      // The next interval brackets the estimate and is narrower.
      EXPECT_LE(m.new_d_min, m.d_refined);
      EXPECT_GE(m.new_d_max, m.d_refined);
      EXPECT_LT(m.new_d_max - m.new_d_min, seg->d_max - seg->d_min);
    }
  EXPECT_GT(found, 300);
}

TEST(EpipolarSearch, InvariantToAffineTargetIntensityChange) {
  const auto pair = rendered_lateral_pair();
  const ImageLevel host(pair.host.image), target(pair.target.image);
  Image changed = pair.target.image;
  const double a = 0.25, b = 12.0;
  for (auto& v : changed.data()) v = static_cast<float>(std::exp(a) * v + b);
  const ImageLevel target2(changed);
  AffineTransfer af;
  af.target = {a, b};
  int compared = 0;
  for (int y = 30; y < 450; y += 23)
    for (int x = 30; x < 450; x += 23) {
      auto patch = make_host_patch(host, Vec2(x, y));
      if (!patch) continue;
      auto seg = make_segment(Vec2(x, y), pair.host_to_target, 0.0, 10.0, pair.cam);
      const auto m1 = search(*seg, *patch, target, {}, pair.cam);
      const auto m2 = search(*seg, *patch, target2, af, pair.cam);
      EXPECT_EQ(m1.status, m2.status);
      if (m1.status == MatchStatus::kFound && m2.status == MatchStatus::kFound) {
        EXPECT_NEAR(m2.d_refined, m1.d_refined, 1e-4 * m1.d_refined);
        ++compared;
      }
    }
  EXPECT_GT(compared, 100);
}

TEST(EpipolarSearch, StripesParallelToTheCurveAreAmbiguous) {
  const auto cam = pinhole_as_omni();
  // Horizontal stripes, horizontal epipolar lines: every step matches equally.
  Image img(480, 480);
  for (int y = 0; y < 480; ++y)
    for (int x = 0; x < 480; ++x) img(x, y) = static_cast<float>(128 + 60 * std::sin(2 * kPi * y / 9.0));
  const ImageLevel lvl(img);
  const SE3 rel(Mat3::Identity(), Vec3(0.2, 0, 0));
  for (int y = 200; y < 280; y += 7) {
    const Vec2 px(240.4, y + 0.3);
    auto patch = make_host_patch(lvl, px);
    auto seg = make_segment(px, rel, 0.0, 10.0, cam);
    ASSERT_TRUE(patch && seg);
    EXPECT_EQ(search(*seg, *patch, lvl, {}, cam).status, MatchStatus::kAmbiguous) << y;
  }
}

TEST(EpipolarSearch, WeakGradientAlongTheCurveIsRejected) {
  const auto cam = pinhole_as_omni();
  Image img = textured_image(480, 480);
  for (auto& v : img.data()) v = static_cast<float>(128 + 0.02 * (v - 128));
  const ImageLevel lvl(img);
  const SE3 rel(Mat3::Identity(), Vec3(0.2, 0, 0));
  int low = 0, total = 0;
  for (int x = 150; x < 330; x += 20) {
    auto patch = make_host_patch(lvl, Vec2(x, 240));
    auto seg = make_segment(Vec2(x, 240), rel, 0.0, 10.0, cam);
    const auto m = search(*seg, *patch, lvl, {}, cam);
    EXPECT_NE(m.status, MatchStatus::kFound);
    low += m.status == MatchStatus::kLowGradient;
    ++total;
  }
  EXPECT_GT(low, total / 2);
}

TEST(EpipolarSearch, XiZeroPathFollowsStraightLine) {
  std::mt19937 rng(9);
  const auto cam = pinhole_as_omni();
  for (int i = 0; i < 30; ++i) {
    const SE3 rel = random_pose(rng, 0.05, 0.2);
    const Vec2 px = random_pixel(rng, 150, 330);
    auto seg = make_segment(px, rel, 0.0, 10.0, cam);
    ASSERT_TRUE(seg && !seg->degenerate);
    const Mat3 E = hat(rel.translation()) * rel.rotation();
    const Vec3 l = E * Vec3((px.x() - 239.5) / 250, (px.y() - 239.5) / 250, 1);
    int visited = 0;
    for (double t = 0; t <= 1.0; t += alpha_step(*seg, t, cam)) {
      auto u = curve_point(*seg, t, cam);
      if (!u || !cam.in_image(*u, 0)) continue;
      const Vec3 xt((u->x() - 239.5) / 250, (u->y() - 239.5) / 250, 1);
      EXPECT_LT(std::abs(l.dot(xt)) / l.head<2>().norm() * 250, 1.0);
      ++visited;
    }
    EXPECT_GT(visited, 0);
  }
}
