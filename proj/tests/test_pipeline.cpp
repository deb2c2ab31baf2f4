#include <gtest/gtest.h>

#include <set>

#include "omnivo/pipeline.hpp"
#include "omnivo/system.hpp"
#include "scene_support.hpp"
#include "test_support.hpp"

using namespace omnivo;
using namespace omnivo::testing;

namespace {

// Ground-truth distance map of a rendered keyframe at selected pixels.
std::vector<DepthSample> true_depth_map(const Frame& f, const synth::RenderResult& r, const CameraModel& cam,
                                        int count = 2000) {
  PipelineConfig cfg;
  std::vector<DepthSample> out;
  for (const auto& px : select_pixels(f, cam, count, cfg).pixels) {
    const double d = true_inv_dist(r, cam, px);
    if (d > 0) out.push_back({px, d});
  }
  return out;
}

double rotation_angle(const SE3& T) { return T.log().tail<3>().norm(); }

std::shared_ptr<Frame> constant_frame(const CameraModel& cam, float v, int id = 0) {
  synth::RenderResult r;
  r.image = Image(cam.width, cam.height, v);
  return make_frame(r, cam, id);
}

}  // namespace

// ---------------------------------------------------------------------------
// Tracking

TEST(TrackFrame, FrameAgainstItselfIsIdentity) {
  const auto pair = rendered_lateral_pair();
  const auto host = make_frame(pair.host, pair.cam);
  const auto ref = make_tracking_reference(*host, pair.cam, SE3(), {}, true_depth_map(*host, pair.host, pair.cam));
  ASSERT_GT(ref.num_points(), 500u);
  PipelineConfig cfg;
  const auto r = track_frame(ref, *host, {SE3()}, {}, cfg);
  ASSERT_TRUE(r.ok);
  EXPECT_LT(r.rel.translation().norm(), 1e-9);
  EXPECT_LT(rotation_angle(r.rel), 1e-9);
  EXPECT_NEAR(r.affine.a, 0, 1e-9);
  EXPECT_NEAR(r.affine.b, 0, 1e-9);
  EXPECT_LT(r.rmse, 1e-6);
}

TEST(TrackFrame, RecoversOneCentimetreLateralStep) {
  const auto pair = rendered_lateral_pair(desk_room_spec(), 0.01);
  const auto host = make_frame(pair.host, pair.cam, 0);
  const auto target = make_frame(pair.target, pair.cam, 1);
  const auto ref = make_tracking_reference(*host, pair.cam, SE3(), {}, true_depth_map(*host, pair.host, pair.cam));
  PipelineConfig cfg;
  const auto r = track_frame(ref, *target, {SE3()}, {}, cfg);
  ASSERT_TRUE(r.ok);
  const Vec3 t_true = pair.host_to_target.translation();
  EXPECT_LT((r.rel.translation() - t_true).norm(), 0.02 * t_true.norm());
  EXPECT_LT(rotation_angle(r.rel.inverse() * pair.host_to_target), 1e-3);
}

TEST(TrackFrame, ConstantTargetImageIsLost) {
  const auto pair = rendered_lateral_pair();
  const auto host = make_frame(pair.host, pair.cam);
  const auto ref = make_tracking_reference(*host, pair.cam, SE3(), {}, true_depth_map(*host, pair.host, pair.cam));
  PipelineConfig cfg;
  EXPECT_FALSE(track_frame(ref, *constant_frame(pair.cam, 128), {SE3()}, {}, cfg).ok);
}

TEST(TrackFrame, ConstantReferenceHasNoPointsAndIsLost) {
  const auto cam = fisheye185();
  const auto flat = constant_frame(cam, 128);
  PipelineConfig cfg;
  std::vector<DepthSample> samples;
  for (const auto& px : select_pixels(*flat, cam, 2000, cfg).pixels) samples.push_back({px, 1.0});
  const auto ref = make_tracking_reference(*flat, cam, SE3(), {}, samples);
  EXPECT_EQ(ref.num_points(), 0u);
  EXPECT_FALSE(track_frame(ref, *flat, {SE3()}, {}, cfg).ok);
}

TEST(TrackFrame, FallsBackToLaterInitializers) {
  const auto pair = rendered_lateral_pair(desk_room_spec(), 0.01);
  const auto host = make_frame(pair.host, pair.cam, 0);
  const auto target = make_frame(pair.target, pair.cam, 1);
  const auto ref = make_tracking_reference(*host, pair.cam, SE3(), {}, true_depth_map(*host, pair.host, pair.cam));
  PipelineConfig cfg;
  // A wildly wrong first guess fails; the identity guess then succeeds.
  const SE3 wrong = SE3::exp((Vec6() << 0, 0, 0, 0, 2.5, 0).finished());
  const auto r = track_frame(ref, *target, {wrong, SE3()}, {}, cfg, 1.0);
  ASSERT_TRUE(r.ok);
  EXPECT_EQ(r.initializer, 1);
}

TEST(MotionInitializers, ConstantVelocityComesFirst) {
  const SE3 ref;
  const SE3 prev = SE3::exp((Vec6() << 0.01, 0, 0, 0, 0.02, 0).finished());
  const SE3 motion = SE3::exp((Vec6() << 0.02, 0, 0.01, 0, 0.01, 0).finished());
  const SE3 last = motion * prev;
  const auto inits = motion_initializers(ref, last, prev);
  ASSERT_GE(inits.size(), 4u);
  EXPECT_LT((inits[0].matrix() - (motion * last).matrix()).norm(), 1e-12);
  EXPECT_LT((inits[1].matrix() - last.matrix()).norm(), 1e-12);
  EXPECT_LT((inits[2].matrix() - (motion * motion * last).matrix()).norm(), 1e-12);
  const SE3 half = inits[3] * last.inverse();
  EXPECT_LT(((half * half).matrix() - motion.matrix()).norm(), 1e-9);
}

// ---------------------------------------------------------------------------
// Keyframe decision

TEST(NeedKeyframe, ZeroMotionAndBrightnessChangeIsNotAKeyframe) {
  const auto pair = rendered_lateral_pair();
  const auto host = make_frame(pair.host, pair.cam);
  const auto ref = make_tracking_reference(*host, pair.cam, SE3(), {}, true_depth_map(*host, pair.host, pair.cam));
  const auto fs = flow_stats(ref, SE3(), host->exposure(), {});
  EXPECT_NEAR(fs.flow, 0, 1e-9);
  EXPECT_NEAR(fs.translation_flow, 0, 1e-9);
  EXPECT_EQ(fs.affine_change, 0);
  EXPECT_FALSE(need_keyframe(fs, 480, 480, PipelineConfig{}));
}

TEST(NeedKeyframe, FlowAloneTriggers) {
  PipelineConfig cfg;
  FlowStats fs;
  // Score 1 is reached at (w + h) / w_f pixels of flow.
  fs.flow = 1.01 * 960 / cfg.kf_flow_weight;
  EXPECT_TRUE(need_keyframe(fs, 480, 480, cfg));
  fs.flow = 0.99 * 960 / cfg.kf_flow_weight;
  EXPECT_FALSE(need_keyframe(fs, 480, 480, cfg));
}

TEST(NeedKeyframe, BrightnessChangeAloneTriggers) {
  PipelineConfig cfg;
  FlowStats fs;
  fs.affine_change = 0.51;
  EXPECT_TRUE(need_keyframe(fs, 480, 480, cfg));
}

TEST(NeedKeyframe, PureRotationWithLargeFlowTriggers) {
  const auto pair = rendered_lateral_pair();
  const auto host = make_frame(pair.host, pair.cam);
  const auto ref = make_tracking_reference(*host, pair.cam, SE3(), {}, true_depth_map(*host, pair.host, pair.cam));
  const SE3 rot(so3_exp(Vec3(0, 0.6, 0)), Vec3::Zero());
  const auto fs = flow_stats(ref, rot, host->exposure(), {});
  EXPECT_LT(fs.translation_flow, 1e-9);
  EXPECT_GT(fs.flow, 960 / PipelineConfig{}.kf_flow_weight);
  EXPECT_TRUE(need_keyframe(fs, 480, 480, PipelineConfig{}));
}

// ---------------------------------------------------------------------------
// Candidate selection

TEST(SelectCandidates, ConstantImageHasNone) {
  const auto cam = fisheye185();
  EXPECT_TRUE(select_candidates(0, *constant_frame(cam, 90), cam, PipelineConfig{}).empty());
}

TEST(SelectCandidates, SingleEdgeGivesPointsOnlyAlongTheEdgeAtMostOnePerCell) {
  const CameraModel cam = CameraModel::pinhole({200, 200, 119.5, 119.5}, 240, 240);
  synth::RenderResult r;
  r.image = Image(240, 240, 60.f);
  for (int y = 0; y < 240; ++y)
    for (int x = 120; x < 240; ++x) r.image(x, y) = 190.f;
  const auto f = make_frame(r, cam);
  PipelineConfig cfg;
  const auto sel = select_pixels(*f, cam, 800, cfg);
  ASSERT_FALSE(sel.pixels.empty());
  std::set<std::pair<int, int>> cells;
  for (const auto& p : sel.pixels) {
    EXPECT_GE(p.x(), 119);
    EXPECT_LE(p.x(), 120);
    EXPECT_TRUE(cells.insert({static_cast<int>(p.x()) / sel.cell, static_cast<int>(p.y()) / sel.cell}).second);
  }
}

TEST(SelectCandidates, FisheyeUsesPixelsBeyondThePinholeCrop) {
  const auto pair = rendered_lateral_pair();
  const auto f = make_frame(pair.host, pair.cam);
  PipelineConfig cfg;
  const auto cands = select_candidates(0, *f, pair.cam, cfg);
  ASSERT_GT(cands.size(), 600u);
  EXPECT_LE(cands.size(), static_cast<std::size_t>(cfg.candidate_count));
  // A 90 degree pinhole crop covers rays up to 45 degrees off axis.
  int outside = 0;
  for (const auto& c : cands) {
    const Vec3 ray = *pair.cam.unit_ray(c.pixel());
    EXPECT_TRUE(pair.cam.valid_pixel(c.pixel(), 3.0));
    if (std::acos(ray.z()) > kPi / 4) ++outside;
  }
  EXPECT_GT(outside, static_cast<int>(cands.size()) / 2);
}

TEST(SelectCandidates, MaskedPixelsAreExcluded) {
  const auto pair = rendered_lateral_pair();
  auto f = make_frame(pair.host, pair.cam);
  // Mask the left half on top of the field-of-view mask.
  f->valid.resize(480 * 480, 1);
  for (int y = 0; y < 480; ++y)
    for (int x = 0; x < 240; ++x) f->valid[static_cast<std::size_t>(y) * 480 + x] = 0;
  for (const auto& c : select_candidates(0, *f, pair.cam, PipelineConfig{})) EXPECT_GE(c.pixel().x(), 243);
}

TEST(SelectCandidates, StartWithTheOpenInterval) {
  const auto pair = rendered_lateral_pair();
  PipelineConfig cfg;
  for (const auto& c : select_candidates(3, *make_frame(pair.host, pair.cam), pair.cam, cfg)) {
    EXPECT_EQ(c.host_kf, 3);
    EXPECT_EQ(c.d_min, 0);
    EXPECT_EQ(c.d_max, cfg.d_cap);
    EXPECT_FALSE(c.has_estimate);
    EXPECT_GT(c.sigma(), 0);
  }
}

// ---------------------------------------------------------------------------
// Candidate refinement

TEST(RefineCandidates, DegenerateBaselineLeavesIntervalUnchanged) {
  const auto pair = rendered_lateral_pair();
  const auto host = make_frame(pair.host, pair.cam);
  PipelineConfig cfg;
  auto cands = select_candidates(0, *host, pair.cam, cfg);
  ASSERT_FALSE(cands.empty());
  const SE3 rot(so3_exp(Vec3(0, 0.05, 0)), Vec3::Zero());
  for (auto c : cands) {
    const double lo = c.d_min, hi = c.d_max;
    EXPECT_EQ(refine_candidate(c, rot, host->pyramid.level(0), {}, pair.cam, cfg), MatchStatus::kDegenerate);
    EXPECT_EQ(c.d_min, lo);
    EXPECT_EQ(c.d_max, hi);
    EXPECT_FALSE(c.dropped);
  }
}

TEST(RefineCandidates, TwoGoodObservationsShrinkTheInterval) {
  const auto spec = desk_room_spec();
  const auto cam = synth::camera_for(spec);
  const auto scene = synth::make_scene(spec);
  synth::RenderOptions opt;
  opt.supersample = spec.supersample;
  const SE3 T0(Mat3::Identity(), Vec3(0.05, 0.1, 0.2));
  const SE3 T1(Mat3::Identity(), Vec3(0.08, 0.1, 0.2));
  const SE3 T2(Mat3::Identity(), Vec3(0.15, 0.1, 0.2));
  const auto r0 = synth::render(scene, T0, cam, opt);
  const auto r1 = synth::render(scene, T1, cam, opt);
  const auto r2 = synth::render(scene, T2, cam, opt);
  PipelineConfig cfg;
  auto cands = select_candidates(0, *make_frame(r0, cam), cam, cfg);
  int both = 0, strict = 0;
  for (auto& c : cands) {
    const double s0 = c.sigma();
    if (refine_candidate(c, T1.inverse() * T0, ImageLevel(r1.image), {}, cam, cfg) !=
        MatchStatus::kFound)
      continue;
    const double s1 = c.sigma();
    EXPECT_LT(s1, s0);
    if (refine_candidate(c, T2.inverse() * T0, ImageLevel(r2.image), {}, cam, cfg) != MatchStatus::kFound) continue;
    ++both;
    EXPECT_LE(c.sigma(), s1);
    if (c.sigma() < s1) ++strict;
  }
  ASSERT_GT(both, 200);
  EXPECT_EQ(strict, both);
}

TEST(RefineCandidates, PointLeavingThePinholeViewStaysRefinableInOmni) {
  const auto spec = desk_room_spec();
  const auto scene = synth::make_scene(spec);
  const CameraModel omni = synth::camera_for(spec);
  const CameraModel pin = make_pinhole_crop(omni, 240, 240, 90).camera;
  synth::RenderOptions opt;
  opt.supersample = spec.supersample;
  // The target camera turns 50 degrees away from the point while stepping
  // sideways: a ray 30 degrees off axis ends up about 80 degrees off axis.
  const SE3 T0(Mat3::Identity(), Vec3(0.05, 0.1, 0.2));
  const SE3 T1(so3_exp(Vec3(0, -50.0 * kPi / 180, 0)), Vec3(0.1, 0.1, 0.2));
  const SE3 host_to_target = T1.inverse() * T0;
  const Vec3 dir(std::sin(30.0 * kPi / 180), 0.05, std::cos(30.0 * kPi / 180));
  PipelineConfig cfg;
  int omni_found = 0, pin_dropped = 0, tried = 0, informative = 0;
  for (const CameraModel* cam : {&omni, &pin}) {
    const auto r0 = synth::render(scene, T0, *cam, opt);
    const auto r1 = synth::render(scene, T1, *cam, opt);
    const Vec2 centre = *cam->project(dir);
    const auto host = make_frame(r0, *cam);
    for (int dy = -6; dy <= 6; dy += 3)
      for (int dx = -6; dx <= 6; dx += 3) {
        Candidate c;
        c.patch = *make_host_patch(host->pyramid.level(0), centre + Vec2(dx, dy));
        c.d_max = cfg.d_cap;
        const double d = true_inv_dist(r0, *cam, c.pixel());
        ASSERT_TRUE(is_in_fov(host_to_target * (*cam->unproject(c.pixel(), d)), omni));
        const auto st = refine_candidate(c, host_to_target, ImageLevel(r1.image), {}, *cam, cfg);
        if (cam == &omni) {
          ++tried;
          EXPECT_FALSE(c.dropped);
          if (st == MatchStatus::kLowGradient) continue;  // flat pixel, not an informative candidate
          ++informative;
          if (st == MatchStatus::kFound && std::abs(c.inv_dist - d) < 0.05 * d) ++omni_found;
        } else {
          EXPECT_EQ(st, MatchStatus::kOutOfBounds);
          if (c.dropped) ++pin_dropped;
        }
      }
  }
  EXPECT_EQ(pin_dropped, tried);
  ASSERT_GE(informative, 5);
  EXPECT_GE(omni_found, informative * 3 / 4);
}

TEST(RefineCandidates, OutOfBoundsDropsAndRepeatedAmbiguityDrops) {
  PipelineConfig cfg;
  Candidate c;
  c.last_status = MatchStatus::kFound;
  c.d_max = cfg.d_cap;
  // Ambiguity is tolerated once, dropped on the second consecutive time.
  const CameraModel cam = CameraModel::pinhole({200, 200, 119.5, 119.5}, 240, 240);
  Image stripes(240, 240, 0.f);
  for (int y = 0; y < 240; ++y)
    for (int x = 0; x < 240; ++x) stripes(x, y) = static_cast<float>(128 + 80 * std::sin(0.8 * y));
  const ImageLevel lvl(stripes);
  c.patch = *make_host_patch(lvl, Vec2(120, 120));
  const SE3 step(Mat3::Identity(), Vec3(0.05, 0, 0));  // motion along the stripes
  EXPECT_EQ(refine_candidate(c, step, lvl, {}, cam, cfg), MatchStatus::kAmbiguous);
  EXPECT_FALSE(c.dropped);
  EXPECT_EQ(refine_candidate(c, step, lvl, {}, cam, cfg), MatchStatus::kAmbiguous);
  EXPECT_TRUE(c.dropped);
}

// ---------------------------------------------------------------------------
// Marginalization policy

namespace {

// Window of keyframes at the given x positions, without images.
Window line_window(const std::vector<double>& xs) {
  Window w(fisheye185());
  for (std::size_t i = 0; i < xs.size(); ++i) {
    w.add_keyframe(static_cast<int>(i), nullptr, SE3(Mat3::Identity(), Vec3(-xs[i], 0, 0)), {});
    w.keyframes().back().points.resize(20);
  }
  return w;
}

}  // namespace

TEST(MarginalizePolicy, TwoKeyframesAreNeverDropped) {
  auto w = line_window({0, 1});
  for (auto& kf : w.keyframes()) {
    kf.points.clear();
    kf.points_marginalized = 100;
  }
  PipelineConfig cfg;
  cfg.nf = 3;
  EXPECT_TRUE(marginalize_policy(w, cfg).empty());
}

TEST(MarginalizePolicy, FrameWithFourPercentVisibleIsDropped) {
  auto w = line_window({0, 0.1, 0.2, 0.3});
  w.keyframes()[1].points.resize(1);
  w.keyframes()[1].points_marginalized = 24;  // 1 / 25 = 4 %
  PipelineConfig cfg;
  cfg.nf = 7;
  EXPECT_EQ(marginalize_policy(w, cfg), std::vector<int>{1});
}

TEST(MarginalizePolicy, LatestTwoAreKeptEvenWhenInvisible) {
  auto w = line_window({0, 0.1, 0.2, 0.3});
  for (int i : {2, 3}) {
    w.keyframes()[static_cast<std::size_t>(i)].points.clear();
    w.keyframes()[static_cast<std::size_t>(i)].points_marginalized = 50;
  }
  EXPECT_TRUE(marginalize_policy(w, PipelineConfig{}).empty());
}

TEST(MarginalizePolicy, OneFrameOverTheLimitDropsTheHighestDistanceScore) {
  // Keyframes at x = 0, 1, 1.1, 2; the latest is at 2.
  //   frame 0: sqrt(2) * (1/1 + 1/1.1 + 1/2)   = 3.41
  //   frame 1: sqrt(1) * (1/1 + 1/0.1 + 1/1)   = 12.0
  // Frame 2 is one of the latest two.
  auto w = line_window({0, 1, 1.1, 2});
  std::vector<int> keep = {0, 1, 2, 3};
  EXPECT_NEAR(distance_score(w, 0, keep), std::sqrt(2.0) * (1 / (1 + 1e-5) + 1 / (1.1 + 1e-5) + 1 / (2 + 1e-5)), 1e-9);
  EXPECT_NEAR(distance_score(w, 1, keep), 1 / (1 + 1e-5) + 1 / (0.1 + 1e-5) + 1 / (1 + 1e-5), 1e-9);
  PipelineConfig cfg;
  cfg.nf = 3;
  EXPECT_EQ(marginalize_policy(w, cfg), std::vector<int>{1});
}

TEST(MarginalizePolicy, AtTheLimitNothingIsDropped) {
  auto w = line_window({0, 1, 1.1, 2});
  PipelineConfig cfg;
  cfg.nf = 4;
  EXPECT_TRUE(marginalize_policy(w, cfg).empty());
}

// ---------------------------------------------------------------------------
// Activation

namespace {

struct ThreeViews {
  CameraModel cam;
  std::vector<synth::RenderResult> renders;
  std::vector<SE3> poses;  // world -> camera
  Window window;
};

ThreeViews three_views() {
  const auto spec = desk_room_spec();
  ThreeViews v;
  v.cam = synth::camera_for(spec);
  const auto scene = synth::make_scene(spec);
  synth::RenderOptions opt;
  opt.supersample = spec.supersample;
  v.window = Window(v.cam);
  for (int i = 0; i < 3; ++i) {
    const SE3 T_wc(so3_exp(Vec3(0, 0.4 * i, 0)), Vec3(0.05 + 0.05 * i, 0.1, 0.2));
    v.renders.push_back(synth::render(scene, T_wc, v.cam, opt));
    v.poses.push_back(T_wc.inverse());
    v.window.add_keyframe(i, make_frame(v.renders.back(), v.cam, i), v.poses.back(), {});
  }
  return v;
}

// Candidates of keyframe `host` with ground-truth distances, marked converged.
std::vector<Candidate> converged_candidates(const ThreeViews& v, int host, const PipelineConfig& cfg) {
  auto cands = select_candidates(host, *v.window.keyframe(host).frame, v.cam, cfg);
  for (auto& c : cands) {
    const double d = true_inv_dist(v.renders[static_cast<std::size_t>(host)], v.cam, c.pixel());
    c.inv_dist = d;
    c.d_min = 0.99 * d;
    c.d_max = 1.01 * d;
    c.has_estimate = true;
    c.last_status = MatchStatus::kFound;
    c.quality = 5;
    c.pixel_interval = 1;
  }
  return cands;
}

}  // namespace

TEST(ActivateCandidates, NothingConvergedActivatesNothing) {
  auto v = three_views();
  PipelineConfig cfg;
  auto cands = select_candidates(0, *v.window.keyframe(0).frame, v.cam, cfg);
  ASSERT_FALSE(cands.empty());
  EXPECT_EQ(activate_candidates(v.window, cands, cfg), 0);
  EXPECT_EQ(v.window.num_active_points(), 0);
}

TEST(ActivateCandidates, NeverExceedsTheTarget) {
  auto v = three_views();
  PipelineConfig cfg;
  cfg.activation_target = 150;
  auto cands = converged_candidates(v, 0, cfg);
  ASSERT_GT(cands.size(), 300u);
  const int first = activate_candidates(v.window, cands, cfg);
  EXPECT_GT(first, 0);
  EXPECT_LE(first, 150);
  EXPECT_LE(v.window.num_active_points(), 150);
  auto more = converged_candidates(v, 1, cfg);
  activate_candidates(v.window, more, cfg);
  EXPECT_LE(v.window.num_active_points(), 150);
}

TEST(ActivateCandidates, ResidualsGoToEveryObservingKeyframe) {
  auto v = three_views();
  PipelineConfig cfg;
  auto cands = converged_candidates(v, 1, cfg);
  ASSERT_GT(activate_candidates(v.window, cands, cfg), 100);
  const auto& host = v.window.keyframe(1);
  for (const auto& p : host.points) {
    std::set<int> expected, actual;
    const Vec3 X = *v.cam.unproject(p.patch.pixel, p.inv_dist);
    for (int t : {0, 2})
      if (is_in_fov(relative_pose(host.pose, v.window.keyframe(t).pose) * X, v.cam)) expected.insert(t);
    for (const auto& r : p.residuals) actual.insert(r.target_kf);
    EXPECT_EQ(actual, expected);
    EXPECT_FALSE(actual.empty());
  }
}

TEST(ActivateCandidates, SpreadsPointsOverTheImage) {
  auto v = three_views();
  PipelineConfig cfg;
  cfg.activation_target = 400;
  auto cands = converged_candidates(v, 1, cfg);
  activate_candidates(v.window, cands, cfg);
  // At most one activation per occupancy cell in the latest keyframe.
  const double cell = std::sqrt(480.0 * 480.0 / 400);
  std::set<std::pair<int, int>> cells;
  const auto& host = v.window.keyframe(1);
  const SE3 rel = relative_pose(host.pose, v.window.keyframes().back().pose);
  for (const auto& p : host.points) {
    const Vec2 u = *v.cam.project(rel * *v.cam.unproject(p.patch.pixel, p.inv_dist));
    EXPECT_TRUE(cells.insert({static_cast<int>(u.x() / cell), static_cast<int>(u.y() / cell)}).second);
  }
}

TEST(PointsToMarginalize, PointsUnseenByTheLatestTwoAreSelected) {
  auto w = line_window({0, 0.1, 0.2});
  auto& pts = w.keyframes()[0].points;
  pts.resize(3);
  pts[0].residuals = {{1, ResidualState::kActive, 0}, {2, ResidualState::kActive, 0}};
  pts[1].residuals = {{2, ResidualState::kOutlier, 0}};
  pts[2].residuals = {};
  const auto sel = points_to_marginalize(w);
  EXPECT_EQ(sel, (std::vector<std::pair<int, int>>{{0, 1}, {0, 2}}));
}

// ---------------------------------------------------------------------------
// Bootstrap

TEST(Bootstrap, StaticCameraStaysUninitialized) {
  const auto pair = rendered_lateral_pair();
  PipelineConfig cfg;
  System sys(pair.cam, cfg);
  for (int i = 0; i < 5; ++i) {
    auto f = make_frame(pair.host, pair.cam, i);
    EXPECT_EQ(sys.add_frame(f), SystemState::kInitializing);
  }
  EXPECT_TRUE(sys.trajectory().empty());
}

TEST(Bootstrap, TenCentimetrePairNormalizesScaleAndReprojects) {
  const auto pair = rendered_lateral_pair(desk_room_spec(), 0.1);
  PipelineConfig cfg;
  Bootstrapper boot(pair.cam, cfg);
  boot.reset(make_frame(pair.host, pair.cam, 0));
  const auto res = boot.add(*make_frame(pair.target, pair.cam, 1));
  ASSERT_TRUE(res.success);
  double mean = 0, sq = 0;
  int n = 0;
  const Mat3 R_gt = pair.host_to_target.rotation();
  for (const auto& p : boot.points()) {
    if (!p.good) continue;
    mean += p.inv_dist;
    const Vec3 ray = *pair.cam.unit_ray(p.pixel);
    const double d_gt = true_inv_dist(pair.host, pair.cam, p.pixel);
    const auto u_est = pair.cam.project(res.rel.rotation() * ray / p.inv_dist + res.rel.translation());
    const auto u_gt = pair.cam.project(R_gt * ray / d_gt + pair.host_to_target.translation());
    ASSERT_TRUE(u_est && u_gt);
    sq += (*u_est - *u_gt).squaredNorm();
    ++n;
  }
  ASSERT_GT(n, 500);
  EXPECT_NEAR(mean / n, 1.0, 1e-9);
  EXPECT_LT(std::sqrt(sq / n), 1.0);
  // Direction of travel is recovered.
  EXPECT_GT(res.rel.translation().normalized().dot(pair.host_to_target.translation().normalized()), 0.99);
}

TEST(Bootstrap, PureRotationIsRejected) {
  const auto spec = desk_room_spec();
  const auto cam = synth::camera_for(spec);
  const auto scene = synth::make_scene(spec);
  synth::RenderOptions opt;
  opt.supersample = spec.supersample;
  const SE3 T0(Mat3::Identity(), Vec3(0.05, 0.1, 0.2));
  PipelineConfig cfg;
  Bootstrapper boot(cam, cfg);
  boot.reset(make_frame(synth::render(scene, T0, cam, opt), cam, 0));
  for (int i = 1; i <= 3; ++i) {
    const SE3 Ti(so3_exp(Vec3(0, 0.03 * i, 0)), T0.translation());
    const auto res = boot.add(*make_frame(synth::render(scene, Ti, cam, opt), cam, i));
    EXPECT_FALSE(res.success);
  }
}

// ---------------------------------------------------------------------------
// Whole system on a short rendered sequence

namespace {

struct ShortSequence {
  CameraModel cam;
  std::vector<std::shared_ptr<Frame>> frames;
  std::vector<SE3> gt;  // camera -> world
};

const ShortSequence& short_sequence() {
  static const ShortSequence seq = [] {
    ShortSequence s;
    auto spec = desk_room_spec();
    spec.frames = 100;
    spec.radius = 0.3;
    const auto poses = synth::make_poses(spec);
    const auto scene = synth::make_scene(spec);
    s.cam = synth::camera_for(spec);
    synth::RenderOptions opt;
    opt.supersample = 1;
    for (int i = 0; i < 18; ++i) {
      s.frames.push_back(make_frame(synth::render(scene, poses[static_cast<std::size_t>(i)], s.cam, opt), s.cam, i));
      s.gt.push_back(poses[static_cast<std::size_t>(i)]);
    }
    return s;
  }();
  return seq;
}

}  // namespace

TEST(System, WindowStaysWithinLimitsAndTracksTheSequence) {
  const auto& seq = short_sequence();
  PipelineConfig cfg;
  cfg.nf = 3;
  System sys(seq.cam, cfg);
  for (const auto& f : seq.frames) {
    ASSERT_NE(sys.add_frame(f), SystemState::kLost) << "frame " << f->id;
    EXPECT_LE(sys.window().size(), cfg.nf);
    for (const auto& c : sys.candidates()) EXPECT_GE(sys.window().index_of(c.host_kf), 0);
  }
  EXPECT_EQ(sys.state(), SystemState::kTracking);
  EXPECT_LE(sys.max_window_size(), static_cast<std::size_t>(cfg.nf + 1));
  EXPECT_GE(sys.num_keyframes(), 4);
  const auto traj = sys.trajectory();
  EXPECT_EQ(traj.size(), seq.frames.size());
  Trajectory gt;
  for (std::size_t i = 0; i < seq.gt.size(); ++i) gt.push_back(seq.frames[i]->timestamp, seq.gt[i]);
  const auto a = sim3_align(traj, gt);
  EXPECT_LT(a.rmse, 0.01 * gt.length());
}

TEST(System, DeterministicModeRepeatsBitForBit) {
  const auto& seq = short_sequence();
  PipelineConfig cfg;
  auto run = [&] {
    System sys(seq.cam, cfg);
    for (const auto& f : seq.frames) sys.add_frame(f);
    return sys.trajectory();
  };
  const auto a = run(), b = run();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].timestamp, b[i].timestamp);
    EXPECT_EQ(a[i].pose.translation(), b[i].pose.translation());
    EXPECT_EQ(a[i].pose.unit_quaternion().coeffs(), b[i].pose.unit_quaternion().coeffs());
  }
}

TEST(System, ThreadedModeTracksTheSequence) {
  const auto& seq = short_sequence();
  System sys(seq.cam, PipelineConfig{}, false);
  for (const auto& f : seq.frames) ASSERT_NE(sys.add_frame(f), SystemState::kLost);
  sys.finish();
  EXPECT_GE(sys.trajectory().size(), seq.frames.size() - 2);
}

TEST(System, LostTrackingIsSticky) {
  const auto& seq = short_sequence();
  System sys(seq.cam, PipelineConfig{});
  for (int i = 0; i < 6; ++i) sys.add_frame(seq.frames[static_cast<std::size_t>(i)]);
  ASSERT_EQ(sys.state(), SystemState::kTracking);
  EXPECT_EQ(sys.add_frame(constant_frame(seq.cam, 100, 6)), SystemState::kLost);
  EXPECT_EQ(sys.add_frame(seq.frames[7]), SystemState::kLost);
  EXPECT_FALSE(sys.records().back().tracked);
}
