#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <optional>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <Eigen/Eigenvalues>

#include "omnivo/camera.hpp"
#include "omnivo/geometry.hpp"
#include "omnivo/image.hpp"
#include "omnivo/residuals.hpp"

namespace omnivo {

using Eigen::MatrixXd;
using Eigen::VectorXd;

inline constexpr int kIntrinsicDims = 5;
inline constexpr int kFrameDims = 8;  // 6 pose + affine (a, b)

inline int frame_offset(int frame_index) { return kIntrinsicDims + kFrameDims * frame_index; }
inline int system_dims(int num_frames) { return kIntrinsicDims + kFrameDims * num_frames; }

// ---------------------------------------------------------------------------
// Window state

struct PointResidual {
  int target_kf = -1;
  ResidualState state = ResidualState::kActive;
  double energy = 0;  // cached from the last evaluation
};

struct ActivePoint {
  int id = -1;
  HostPatch patch;
  double inv_dist = 1.0;
  std::vector<PointResidual> residuals;

  int num_active_residuals() const {
    return static_cast<int>(std::count_if(residuals.begin(), residuals.end(),
                                          [](const PointResidual& r) { return r.state == ResidualState::kActive; }));
  }
};

struct WindowKeyframe {
  int kf_id = -1;
  std::shared_ptr<const Frame> frame;
  SE3 pose;  // world -> camera
  AffineBrightness affine;
  std::vector<ActivePoint> points;
  int points_marginalized = 0;

  double exposure() const { return frame->exposure(); }
  const ImageLevel& level0() const { return frame->pyramid.level(0); }
};

// Linearization point of a frame in the marginalization prior.
struct PriorFrameState {
  int kf_id = -1;
  SE3 pose;
  AffineBrightness affine;
};

// Gaussian prior E(D) = 2 b^T D + D^T H D over (intrinsics, frames...), where
// D is the offset of the current state from the stored linearization points.
struct MarginalizationPrior {
  std::vector<PriorFrameState> frames;
  Vec5 intrinsics0 = Vec5::Zero();
  MatrixXd H = MatrixXd::Zero(kIntrinsicDims, kIntrinsicDims);
  VectorXd b = VectorXd::Zero(kIntrinsicDims);

  int dims() const { return system_dims(static_cast<int>(frames.size())); }
  int index_of(int kf_id) const {
    for (std::size_t i = 0; i < frames.size(); ++i)
      if (frames[i].kf_id == kf_id) return static_cast<int>(i);
    return -1;
  }
  bool empty() const { return frames.empty() && H.isZero(0); }
};

struct OptimizerConfig {
  int max_iterations = 6;
  double convergence_rel = 1e-4;
  double initial_lambda = 1e-4;
  int max_retries = 5;
  ResidualOptions residual;
  // Quadratic prior weights on every frame's affine parameters.
  double affine_prior_a = 1e5;
  double affine_prior_b = 1e2;
  // Quadratic prior weights pulling intrinsics to their calibration values.
  Vec5 intrinsics_prior = Vec5(1e5, 1e5, 1e5, 1e5, 1e8);
  bool optimize_intrinsics = true;
  bool fix_oldest_pose = true;
  double min_inv_dist = 1e-4;
  double max_inv_dist = 1e3;
};

class Window {
 public:
  Window() = default;
  explicit Window(const CameraModel& camera) : camera_(camera), calibration_(camera.intrinsics) {
    prior_.intrinsics0 = calibration_.to_vector();
  }

  const CameraModel& camera() const { return camera_; }
  CameraModel& camera() { return camera_; }
  const UnifiedOmniParams& calibration() const { return calibration_; }

  std::vector<WindowKeyframe>& keyframes() { return keyframes_; }
  const std::vector<WindowKeyframe>& keyframes() const { return keyframes_; }
  int size() const { return static_cast<int>(keyframes_.size()); }

  MarginalizationPrior& prior() { return prior_; }
  const MarginalizationPrior& prior() const { return prior_; }

  int index_of(int kf_id) const {
    for (std::size_t i = 0; i < keyframes_.size(); ++i)
      if (keyframes_[i].kf_id == kf_id) return static_cast<int>(i);
    return -1;
  }
  WindowKeyframe& keyframe(int kf_id) { return keyframes_.at(static_cast<std::size_t>(index_of(kf_id))); }
  const WindowKeyframe& keyframe(int kf_id) const { return keyframes_.at(static_cast<std::size_t>(index_of(kf_id))); }

  int num_active_points() const {
    int n = 0;
    for (const auto& kf : keyframes_) n += static_cast<int>(kf.points.size());
    return n;
  }

  AffineTransfer affine_transfer(const WindowKeyframe& host, const WindowKeyframe& target) const {
    return {host.exposure(), target.exposure(), host.affine, target.affine};
  }

  // Adds a keyframe and connects every existing active point that projects
  // into it.
  WindowKeyframe& add_keyframe(int kf_id, std::shared_ptr<const Frame> frame, const SE3& pose,
                               const AffineBrightness& affine) {
    WindowKeyframe kf;
    kf.kf_id = kf_id;
    kf.frame = std::move(frame);
    kf.pose = pose;
    kf.affine = affine;
    for (auto& host : keyframes_) {
      const SE3 rel = relative_pose(host.pose, pose);
      for (auto& p : host.points)
        if (projects_into(p, rel)) p.residuals.push_back({kf_id, ResidualState::kActive, 0.0});
    }
    keyframes_.push_back(std::move(kf));
    return keyframes_.back();
  }

  // Adds an active point hosted in `host_kf` with residuals toward every other
  // keyframe that observes it. Returns nullptr if no keyframe observes it.
  ActivePoint* add_point(int host_kf, const HostPatch& patch, double inv_dist) {
    auto& host = keyframe(host_kf);
    ActivePoint p;
    p.id = next_point_id_++;
    p.patch = patch;
    p.inv_dist = inv_dist;
    for (const auto& target : keyframes_) {
      if (target.kf_id == host_kf) continue;
      if (projects_into(p, relative_pose(host.pose, target.pose)))
        p.residuals.push_back({target.kf_id, ResidualState::kActive, 0.0});
    }
    if (p.residuals.empty()) return nullptr;
    host.points.push_back(std::move(p));
    return &host.points.back();
  }

  bool projects_into(const ActivePoint& p, const SE3& host_to_target) const {
    auto X = camera_.unproject(p.patch.pixel, p.inv_dist);
    return X && is_in_fov(host_to_target * *X, camera_);
  }

  ResidualEvaluation evaluate(const WindowKeyframe& host, const ActivePoint& p, const WindowKeyframe& target,
                              const ResidualOptions& opt, bool with_jacobians) const {
    return evaluate_residual(p.patch, p.inv_dist, relative_pose(host.pose, target.pose), camera_, target.level0(),
                             affine_transfer(host, target), opt, with_jacobians);
  }

  // Sum of cached residual energies (active residuals only).
  double cached_photometric_energy() const {
    double e = 0;
    for (const auto& kf : keyframes_)
      for (const auto& p : kf.points)
        for (const auto& r : p.residuals)
          if (r.state == ResidualState::kActive) e += r.energy;
    return e;
  }

  // Re-evaluates every active residual, refreshing caches; energies above the
  // outlier cut are clamped to it.
  double refresh_photometric_energy(const ResidualOptions& opt) {
    double e = 0;
    for (auto& host : keyframes_)
      for (auto& p : host.points)
        for (auto& r : p.residuals) {
          if (r.state != ResidualState::kActive) continue;
          const auto ev = evaluate(host, p, keyframe(r.target_kf), opt, false);
          r.energy = ev.state == ResidualState::kOutOfBounds ? opt.outlier_energy : std::min(ev.energy, opt.outlier_energy);
          e += r.energy;
        }
    return e;
  }

  int next_point_id() const { return next_point_id_; }

 private:
  CameraModel camera_;
  UnifiedOmniParams calibration_;
  std::vector<WindowKeyframe> keyframes_;
  MarginalizationPrior prior_;
  int next_point_id_ = 0;
};

// ---------------------------------------------------------------------------
// Normal equations

struct PointBlock {
  int kf_index = -1;
  int point_index = -1;
  double h_pp = 0;
  double b_p = 0;
  VectorXd h_fp;  // coupling with the frame/intrinsics block
};

// Gauss-Newton system E(x + d) ~ E + 2 b^T d + d^T H d, split into the
// frame/intrinsics block and per-point scalar blocks.
struct HessianSystem {
  int num_frames = 0;
  MatrixXd H_ff;
  VectorXd b_f;
  std::vector<PointBlock> points;
  double energy = 0;

  static HessianSystem zeros(int num_frames) {
    HessianSystem s;
    s.num_frames = num_frames;
    s.H_ff = MatrixXd::Zero(system_dims(num_frames), system_dims(num_frames));
    s.b_f = VectorXd::Zero(system_dims(num_frames));
    return s;
  }
  int frame_dims() const { return system_dims(num_frames); }

  // Dense [[H_ff, H_fp], [H_fp^T, H_pp]] for verification.
  MatrixXd dense_hessian() const {
    const int nf = frame_dims();
    const int n = nf + static_cast<int>(points.size());
    MatrixXd H = MatrixXd::Zero(n, n);
    H.topLeftCorner(nf, nf) = H_ff;
    for (std::size_t i = 0; i < points.size(); ++i) {
      const int k = nf + static_cast<int>(i);
      H.block(0, k, nf, 1) = points[i].h_fp;
      H.block(k, 0, 1, nf) = points[i].h_fp.transpose();
      H(k, k) = points[i].h_pp;
    }
    return H;
  }
  VectorXd dense_gradient() const {
    const int nf = frame_dims();
    VectorXd b(nf + static_cast<int>(points.size()));
    b.head(nf) = b_f;
    for (std::size_t i = 0; i < points.size(); ++i) b[nf + static_cast<int>(i)] = points[i].b_p;
    return b;
  }
};

// Offset of the current state from the prior's linearization points, in the
// prior's ordering.
inline VectorXd prior_offset(const Window& w) {
  const auto& pr = w.prior();
  VectorXd d = VectorXd::Zero(pr.dims());
  d.head<kIntrinsicDims>() = w.camera().intrinsics.to_vector() - pr.intrinsics0;
  for (std::size_t i = 0; i < pr.frames.size(); ++i) {
    const auto& f0 = pr.frames[i];
    const int wi = w.index_of(f0.kf_id);
    if (wi < 0) continue;
    const auto& kf = w.keyframes()[static_cast<std::size_t>(wi)];
    const int o = frame_offset(static_cast<int>(i));
    d.segment<6>(o) = (kf.pose * f0.pose.inverse()).log();
    d[o + 6] = kf.affine.a - f0.affine.a;
    d[o + 7] = kf.affine.b - f0.affine.b;
  }
  return d;
}

// Index map from prior dims to window system dims (-1 if the frame left).
inline std::vector<int> prior_to_system(const Window& w) {
  const auto& pr = w.prior();
  std::vector<int> map(static_cast<std::size_t>(pr.dims()), -1);
  for (int k = 0; k < kIntrinsicDims; ++k) map[static_cast<std::size_t>(k)] = k;
  for (std::size_t i = 0; i < pr.frames.size(); ++i) {
    const int wi = w.index_of(pr.frames[i].kf_id);
    if (wi < 0) continue;
    for (int k = 0; k < kFrameDims; ++k)
      map[static_cast<std::size_t>(frame_offset(static_cast<int>(i)) + k)] = frame_offset(wi) + k;
  }
  return map;
}

inline double prior_energy(const Window& w) {
  const auto& pr = w.prior();
  if (pr.frames.empty() && pr.H.isZero(0) && pr.b.isZero(0)) return 0.0;
  const VectorXd d = prior_offset(w);
  return 2.0 * pr.b.dot(d) + d.dot(pr.H * d);
}

inline double absolute_prior_energy(const Window& w, const OptimizerConfig& cfg) {
  double e = 0;
  for (const auto& kf : w.keyframes())
    e += cfg.affine_prior_a * kf.affine.a * kf.affine.a + cfg.affine_prior_b * kf.affine.b * kf.affine.b;
  const Vec5 dc = w.camera().intrinsics.to_vector() - w.calibration().to_vector();
  e += dc.dot(cfg.intrinsics_prior.cwiseProduct(dc));
  return e;
}

inline double window_energy(Window& w, const OptimizerConfig& cfg) {
  return w.refresh_photometric_energy(cfg.residual) + absolute_prior_energy(w, cfg) + prior_energy(w);
}

// Accumulates J^T W J and J^T W r over every active residual (marking
// residuals that left the image or became outliers), the affine and
// intrinsics priors, and the marginalization prior.
inline HessianSystem build_system(Window& w, const OptimizerConfig& cfg) {
  const int nfr = w.size();
  HessianSystem sys = HessianSystem::zeros(nfr);
  const int nf = sys.frame_dims();
  constexpr int kLocal = kIntrinsicDims + 2 * kFrameDims;  // c | host | target

  for (int hi = 0; hi < nfr; ++hi) {
    auto& host = w.keyframes()[static_cast<std::size_t>(hi)];
    for (int pi = 0; pi < static_cast<int>(host.points.size()); ++pi) {
      auto& p = host.points[static_cast<std::size_t>(pi)];
      PointBlock pb;
      pb.kf_index = hi;
      pb.point_index = pi;
      pb.h_fp = VectorXd::Zero(nf);
      for (auto& r : p.residuals) {
        if (r.state != ResidualState::kActive) continue;
        const int ti = w.index_of(r.target_kf);
        const auto& target = w.keyframes()[static_cast<std::size_t>(ti)];
        const auto ev = w.evaluate(host, p, target, cfg.residual, true);
        if (ev.state != ResidualState::kActive) {
          r.state = ev.state;
          r.energy = 0;
          continue;
        }
        r.energy = ev.energy;
        sys.energy += ev.energy;
        const auto& J = *ev.jac;
        Eigen::Matrix<double, kPatternSize, kLocal> Jl;
        Jl << J.intrinsics, J.host_pose, J.host_affine, J.target_pose, J.target_affine;
        const Eigen::Matrix<double, kLocal, kPatternSize> JlW = Jl.transpose() * ev.weight.asDiagonal();
        const Eigen::Matrix<double, kLocal, kLocal> Hl = JlW * Jl;
        const Eigen::Matrix<double, kLocal, 1> bl = JlW * ev.r;
        const Eigen::Matrix<double, kLocal, 1> hd = JlW * J.inv_dist;

        const int off[3] = {0, frame_offset(hi), frame_offset(ti)};
        const int len[3] = {kIntrinsicDims, kFrameDims, kFrameDims};
        const int loc[3] = {0, kIntrinsicDims, kIntrinsicDims + kFrameDims};
        for (int a = 0; a < 3; ++a) {
          for (int c = 0; c < 3; ++c)
            sys.H_ff.block(off[a], off[c], len[a], len[c]) += Hl.block(loc[a], loc[c], len[a], len[c]);
          sys.b_f.segment(off[a], len[a]) += bl.segment(loc[a], len[a]);
          pb.h_fp.segment(off[a], len[a]) += hd.segment(loc[a], len[a]);
        }
        pb.h_pp += J.inv_dist.dot(ev.weight.cwiseProduct(J.inv_dist));
        pb.b_p += J.inv_dist.dot(ev.weight.cwiseProduct(ev.r));
      }
      sys.points.push_back(std::move(pb));
    }
  }

  // Absolute priors.
  for (int fi = 0; fi < nfr; ++fi) {
    const auto& kf = w.keyframes()[static_cast<std::size_t>(fi)];
    const int o = frame_offset(fi);
    sys.H_ff(o + 6, o + 6) += cfg.affine_prior_a;
    sys.H_ff(o + 7, o + 7) += cfg.affine_prior_b;
    sys.b_f[o + 6] += cfg.affine_prior_a * kf.affine.a;
    sys.b_f[o + 7] += cfg.affine_prior_b * kf.affine.b;
  }
  const Vec5 dc = w.camera().intrinsics.to_vector() - w.calibration().to_vector();
  for (int k = 0; k < kIntrinsicDims; ++k) {
    sys.H_ff(k, k) += cfg.intrinsics_prior[k];
    sys.b_f[k] += cfg.intrinsics_prior[k] * dc[k];
  }
  sys.energy += absolute_prior_energy(w, cfg);

  // Marginalization prior.
  const auto& pr = w.prior();
  if (pr.dims() > kIntrinsicDims || !pr.H.isZero(0)) {
    const VectorXd d = prior_offset(w);
    const VectorXd g = pr.b + pr.H * d;
    const auto map = prior_to_system(w);
    for (int i = 0; i < pr.dims(); ++i) {
      const int si = map[static_cast<std::size_t>(i)];
      if (si < 0) continue;
      sys.b_f[si] += g[i];
      for (int j = 0; j < pr.dims(); ++j) {
        const int sj = map[static_cast<std::size_t>(j)];
        if (sj >= 0) sys.H_ff(si, sj) += pr.H(i, j);
      }
    }
    sys.energy += 2.0 * pr.b.dot(d) + d.dot(pr.H * d);
  }
  return sys;
}

struct SchurStep {
  VectorXd frames;
  VectorXd points;
};

// Solves (H + lambda diag(H)) d = -b by eliminating the point block:
//   H_sc = H_ff - H_fp H_pp^-1 H_pf,  b_sc = b_f - H_fp H_pp^-1 b_p.
// Dims flagged in `fixed` and points without any information get a zero
// increment. nullopt if the reduced system is singular.
inline std::optional<SchurStep> solve_schur(const HessianSystem& sys, double lambda,
                                            const std::vector<bool>& fixed = {}) {
  const int nf = sys.frame_dims();
  MatrixXd Hsc = sys.H_ff;
  VectorXd bsc = sys.b_f;
  for (int i = 0; i < nf; ++i) Hsc(i, i) *= 1.0 + lambda;
  std::vector<double> hpp(sys.points.size());
  for (std::size_t i = 0; i < sys.points.size(); ++i) {
    const auto& pb = sys.points[i];
    hpp[i] = pb.h_pp * (1.0 + lambda);
    // A point whose residuals all dropped out is unconstrained and stays put.
    if (pb.h_pp == 0 && pb.b_p == 0 && pb.h_fp.isZero(0)) continue;
    if (!(hpp[i] > 0)) return std::nullopt;
    const double inv = 1.0 / hpp[i];
    Hsc.noalias() -= inv * pb.h_fp * pb.h_fp.transpose();
    bsc.noalias() -= (inv * pb.b_p) * pb.h_fp;
  }
  for (int i = 0; i < nf; ++i) {
    if (static_cast<int>(fixed.size()) > i && fixed[static_cast<std::size_t>(i)]) {
      Hsc.row(i).setZero();
      Hsc.col(i).setZero();
      Hsc(i, i) = 1.0;
      bsc[i] = 0;
    }
  }
  Eigen::LDLT<MatrixXd> ldlt(Hsc);
  if (ldlt.info() != Eigen::Success || !ldlt.isPositive()) return std::nullopt;
  SchurStep step;
  step.frames = ldlt.solve(-bsc);
  if (!step.frames.allFinite()) return std::nullopt;
  const double rel = (Hsc * step.frames + bsc).norm() / std::max(bsc.norm(), 1e-300);
  if (bsc.norm() > 0 && rel > 1e-6) return std::nullopt;
  step.points.resize(static_cast<Eigen::Index>(sys.points.size()));
  for (std::size_t i = 0; i < sys.points.size(); ++i) {
    const auto& pb = sys.points[i];
    step.points[static_cast<Eigen::Index>(i)] = hpp[i] > 0 ? -(pb.b_p + pb.h_fp.dot(step.frames)) / hpp[i] : 0.0;
  }
  return step;
}

// Schur complement of a dense quadratic form onto the `keep` indices.
inline std::pair<MatrixXd, VectorXd> schur_marginalize(const MatrixXd& H, const VectorXd& b,
                                                       const std::vector<int>& keep, const std::vector<int>& drop) {
  const auto nk = static_cast<Eigen::Index>(keep.size());
  const auto nd = static_cast<Eigen::Index>(drop.size());
  MatrixXd Hkk(nk, nk), Hkd(nk, nd), Hdd(nd, nd);
  VectorXd bk(nk), bd(nd);
  for (Eigen::Index i = 0; i < nk; ++i) {
    bk[i] = b[keep[static_cast<std::size_t>(i)]];
    for (Eigen::Index j = 0; j < nk; ++j) Hkk(i, j) = H(keep[static_cast<std::size_t>(i)], keep[static_cast<std::size_t>(j)]);
    for (Eigen::Index j = 0; j < nd; ++j) Hkd(i, j) = H(keep[static_cast<std::size_t>(i)], drop[static_cast<std::size_t>(j)]);
  }
  for (Eigen::Index i = 0; i < nd; ++i) {
    bd[i] = b[drop[static_cast<std::size_t>(i)]];
    for (Eigen::Index j = 0; j < nd; ++j) Hdd(i, j) = H(drop[static_cast<std::size_t>(i)], drop[static_cast<std::size_t>(j)]);
  }
  // Pseudo-inverse so unobservable directions of the dropped block are ignored.
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(0.5 * (Hdd + Hdd.transpose()));
  const VectorXd ev = es.eigenvalues();
  const double tol = std::max(ev.cwiseAbs().maxCoeff(), 1e-300) * 1e-12;
  VectorXd inv_ev = VectorXd::Zero(nd);
  for (Eigen::Index i = 0; i < nd; ++i) inv_ev[i] = ev[i] > tol ? 1.0 / ev[i] : 0.0;
  const MatrixXd Hdd_inv = es.eigenvectors() * inv_ev.asDiagonal() * es.eigenvectors().transpose();
  MatrixXd Hm = Hkk - Hkd * Hdd_inv * Hkd.transpose();
  VectorXd bm = bk - Hkd * Hdd_inv * bd;
  Hm = 0.5 * (Hm + Hm.transpose());
  return {Hm, bm};
}

// Symmetrises and clips tiny negative eigenvalues from round-off.
inline MatrixXd project_psd(const MatrixXd& H) {
  MatrixXd S = 0.5 * (H + H.transpose());
  if (S.rows() == 0) return S;
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(S);
  VectorXd ev = es.eigenvalues().cwiseMax(0.0);
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

// ---------------------------------------------------------------------------
// Levenberg-Marquardt loop

struct WindowSnapshot {
  std::vector<SE3> poses;
  std::vector<AffineBrightness> affine;
  std::vector<std::vector<double>> inv_dist;
  UnifiedOmniParams intrinsics;

  static WindowSnapshot take(const Window& w) {
    WindowSnapshot s;
    for (const auto& kf : w.keyframes()) {
      s.poses.push_back(kf.pose);
      s.affine.push_back(kf.affine);
      std::vector<double> d;
      d.reserve(kf.points.size());
      for (const auto& p : kf.points) d.push_back(p.inv_dist);
      s.inv_dist.push_back(std::move(d));
    }
    s.intrinsics = w.camera().intrinsics;
    return s;
  }

  void restore(Window& w) const {
    for (std::size_t i = 0; i < w.keyframes().size(); ++i) {
      auto& kf = w.keyframes()[i];
      kf.pose = poses[i];
      kf.affine = affine[i];
      for (std::size_t j = 0; j < kf.points.size(); ++j) kf.points[j].inv_dist = inv_dist[i][j];
    }
    w.camera().intrinsics = intrinsics;
  }
};

inline std::vector<bool> fixed_dims(const Window& w, const OptimizerConfig& cfg) {
  std::vector<bool> fixed(static_cast<std::size_t>(system_dims(w.size())), false);
  if (!cfg.optimize_intrinsics) std::fill(fixed.begin(), fixed.begin() + kIntrinsicDims, true);
  if (w.camera().kind == CameraKind::kPinhole) fixed[4] = true;
  if (cfg.fix_oldest_pose && w.size() > 0)
    for (int k = 0; k < 6; ++k) fixed[static_cast<std::size_t>(frame_offset(0) + k)] = true;
  return fixed;
}

inline void apply_step(Window& w, const HessianSystem& sys, const SchurStep& step, const OptimizerConfig& cfg) {
  Vec5 c = w.camera().intrinsics.to_vector() + step.frames.head<kIntrinsicDims>();
  w.camera().intrinsics = UnifiedOmniParams::from_vector(c);
  for (int fi = 0; fi < w.size(); ++fi) {
    auto& kf = w.keyframes()[static_cast<std::size_t>(fi)];
    const int o = frame_offset(fi);
    kf.pose = SE3::exp(step.frames.segment<6>(o)) * kf.pose;
    kf.affine.a += step.frames[o + 6];
    kf.affine.b += step.frames[o + 7];
  }
  for (std::size_t i = 0; i < sys.points.size(); ++i) {
    const auto& pb = sys.points[i];
    auto& p = w.keyframes()[static_cast<std::size_t>(pb.kf_index)].points[static_cast<std::size_t>(pb.point_index)];
    p.inv_dist = std::clamp(p.inv_dist + step.points[static_cast<Eigen::Index>(i)], cfg.min_inv_dist, cfg.max_inv_dist);
  }
}

struct OptimizeResult {
  double initial_energy = 0;
  double final_energy = 0;
  int iterations = 0;
  int accepted = 0;
  bool aborted = false;
  std::vector<double> energies;  // after each accepted step
  double max_increment = 0;      // largest |frame increment| of the last accepted step
};

inline OptimizeResult optimize_window(Window& w, const OptimizerConfig& cfg) {
  OptimizeResult res;
  double energy = window_energy(w, cfg);
  res.initial_energy = energy;
  res.final_energy = energy;
  if (w.size() < 2) return res;
  double lambda = cfg.initial_lambda;
  const auto fixed = fixed_dims(w, cfg);

  for (int it = 0; it < cfg.max_iterations; ++it) {
    ++res.iterations;
    const HessianSystem sys = build_system(w, cfg);
    // Residuals that left the window at this linearization no longer count.
    energy = window_energy(w, cfg);
    const WindowSnapshot snap = WindowSnapshot::take(w);
    bool accepted = false;
    double new_energy = energy;
    for (int attempt = 0; attempt <= cfg.max_retries; ++attempt) {
      auto step = solve_schur(sys, lambda, fixed);
      if (!step) {
        lambda *= 4;
        continue;
      }
      apply_step(w, sys, *step, cfg);
      new_energy = window_energy(w, cfg);
      if (new_energy <= energy) {
        accepted = true;
        res.max_increment = step->frames.cwiseAbs().maxCoeff();
        lambda = std::max(lambda * 0.5, 1e-8);
        break;
      }
      snap.restore(w);
      lambda *= 4;
    }
    if (!accepted) {
      window_energy(w, cfg);
      res.aborted = true;
      break;
    }
    ++res.accepted;
    res.energies.push_back(new_energy);
    const double rel = (energy - new_energy) / std::max(energy, 1e-12);
    energy = new_energy;
    if (rel < cfg.convergence_rel) break;
  }
  res.final_energy = energy;
  return res;
}

// Drops outlier / out-of-bounds residuals and points left without any.
// Returns the number of removed points.
inline int remove_outliers(Window& w) {
  int removed = 0;
  for (auto& kf : w.keyframes()) {
    for (auto& p : kf.points)
      std::erase_if(p.residuals, [](const PointResidual& r) { return r.state != ResidualState::kActive; });
    removed += static_cast<int>(std::erase_if(kf.points, [](const ActivePoint& p) { return p.residuals.empty(); }));
  }
  return removed;
}

// ---------------------------------------------------------------------------
// Marginalization

// Makes sure every window frame has a slot in the prior; new slots take the
// current state as their (first-estimate) linearization point.
inline void extend_prior(Window& w) {
  auto& pr = w.prior();
  for (const auto& kf : w.keyframes()) {
    if (pr.index_of(kf.kf_id) >= 0) continue;
    const int n = pr.dims();
    MatrixXd H = MatrixXd::Zero(n + kFrameDims, n + kFrameDims);
    H.topLeftCorner(n, n) = pr.H;
    VectorXd b = VectorXd::Zero(n + kFrameDims);
    b.head(n) = pr.b;
    pr.H = std::move(H);
    pr.b = std::move(b);
    pr.frames.push_back({kf.kf_id, kf.pose, kf.affine});
  }
}

// Adds a quadratic form given in window-system coordinates (linearized at the
// current state) to the prior, re-expressed around the prior's
// linearization points.
inline void add_to_prior(Window& w, const MatrixXd& H_sys, const VectorXd& b_sys) {
  extend_prior(w);
  auto& pr = w.prior();
  const auto map = prior_to_system(w);
  const int n = pr.dims();
  MatrixXd H = MatrixXd::Zero(n, n);
  VectorXd b = VectorXd::Zero(n);
  for (int i = 0; i < n; ++i) {
    const int si = map[static_cast<std::size_t>(i)];
    if (si < 0) continue;
    b[i] = b_sys[si];
    for (int j = 0; j < n; ++j) {
      const int sj = map[static_cast<std::size_t>(j)];
      if (sj >= 0) H(i, j) = H_sys(si, sj);
    }
  }
  const VectorXd d = prior_offset(w);
  pr.H += H;
  pr.b += b - H * d;
  pr.H = 0.5 * (pr.H + pr.H.transpose());
}

// Marginalizes the given points (host index, point index) into the prior:
// their residuals are linearized at the current state and the point
// variables eliminated by Schur complement. The points are removed.
inline void marginalize_points(Window& w, std::vector<std::pair<int, int>> points, const OptimizerConfig& cfg) {
  if (points.empty()) return;
  const int nf = system_dims(w.size());
  MatrixXd H = MatrixXd::Zero(nf, nf);
  VectorXd b = VectorXd::Zero(nf);
  constexpr int kLocal = kIntrinsicDims + 2 * kFrameDims;
  for (const auto& [hi, pi] : points) {
    const auto& host = w.keyframes()[static_cast<std::size_t>(hi)];
    const auto& p = host.points[static_cast<std::size_t>(pi)];
    VectorXd h_fp = VectorXd::Zero(nf);
    MatrixXd Hp = MatrixXd::Zero(nf, nf);
    VectorXd bp = VectorXd::Zero(nf);
    double h_pp = 0, b_p = 0;
    for (const auto& r : p.residuals) {
      if (r.state != ResidualState::kActive) continue;
      const int ti = w.index_of(r.target_kf);
      if (ti < 0) continue;
      const auto ev = w.evaluate(host, p, w.keyframes()[static_cast<std::size_t>(ti)], cfg.residual, true);
      if (ev.state != ResidualState::kActive) continue;
      const auto& J = *ev.jac;
      Eigen::Matrix<double, kPatternSize, kLocal> Jl;
      Jl << J.intrinsics, J.host_pose, J.host_affine, J.target_pose, J.target_affine;
      const Eigen::Matrix<double, kLocal, kPatternSize> JlW = Jl.transpose() * ev.weight.asDiagonal();
      const Eigen::Matrix<double, kLocal, kLocal> Hl = JlW * Jl;
      const Eigen::Matrix<double, kLocal, 1> bl = JlW * ev.r;
      const Eigen::Matrix<double, kLocal, 1> hd = JlW * J.inv_dist;
      const int off[3] = {0, frame_offset(hi), frame_offset(ti)};
      const int len[3] = {kIntrinsicDims, kFrameDims, kFrameDims};
      const int loc[3] = {0, kIntrinsicDims, kIntrinsicDims + kFrameDims};
      for (int a = 0; a < 3; ++a) {
        for (int c = 0; c < 3; ++c) Hp.block(off[a], off[c], len[a], len[c]) += Hl.block(loc[a], loc[c], len[a], len[c]);
        bp.segment(off[a], len[a]) += bl.segment(loc[a], len[a]);
        h_fp.segment(off[a], len[a]) += hd.segment(loc[a], len[a]);
      }
      h_pp += J.inv_dist.dot(ev.weight.cwiseProduct(J.inv_dist));
      b_p += J.inv_dist.dot(ev.weight.cwiseProduct(ev.r));
    }
    if (h_pp > 1e-12) {
      H += Hp - h_fp * h_fp.transpose() / h_pp;
      b += bp - h_fp * (b_p / h_pp);
    }
  }
  add_to_prior(w, H, b);

  // Remove, highest index first per host so indices stay valid.
  std::sort(points.begin(), points.end(), [](const auto& a, const auto& b) { return a > b; });
  for (const auto& [hi, pi] : points) {
    auto& kf = w.keyframes()[static_cast<std::size_t>(hi)];
    kf.points.erase(kf.points.begin() + pi);
    ++kf.points_marginalized;
  }
}

// Removes keyframe `kf_id`: points it hosts are marginalized into the prior,
// residuals targeting it are dropped, then its variables are eliminated from
// the prior by Schur complement.
inline void marginalize_frame(Window& w, int kf_id, const OptimizerConfig& cfg) {
  const int fi = w.index_of(kf_id);
  if (fi < 0) return;
  for (auto& kf : w.keyframes())
    for (auto& p : kf.points)
      std::erase_if(p.residuals, [&](const PointResidual& r) { return r.target_kf == kf_id; });

  std::vector<std::pair<int, int>> hosted;
  const auto& host = w.keyframes()[static_cast<std::size_t>(fi)];
  for (int pi = 0; pi < static_cast<int>(host.points.size()); ++pi) hosted.emplace_back(fi, pi);
  marginalize_points(w, hosted, cfg);

  extend_prior(w);
  auto& pr = w.prior();
  const int pi = pr.index_of(kf_id);
  std::vector<int> keep, drop;
  for (int i = 0; i < pr.dims(); ++i) {
    const bool is_f = i >= frame_offset(pi) && i < frame_offset(pi) + kFrameDims;
    (is_f ? drop : keep).push_back(i);
  }
  auto [Hm, bm] = schur_marginalize(pr.H, pr.b, keep, drop);
  pr.H = project_psd(Hm);
  pr.b = bm;
  pr.frames.erase(pr.frames.begin() + pi);

  for (auto& kf : w.keyframes())
    std::erase_if(kf.points, [](const ActivePoint& p) { return p.residuals.empty(); });
  w.keyframes().erase(w.keyframes().begin() + fi);
}

}  // namespace omnivo
