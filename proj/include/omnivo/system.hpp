#pragma once

#include <chrono>
#include <condition_variable>
#include <deque>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <thread>
#include <vector>

#include "omnivo/pipeline.hpp"

namespace omnivo {

enum class SystemState { kInitializing, kTracking, kLost };

inline const char* to_string(SystemState s) {
  switch (s) {
    case SystemState::kInitializing: return "initializing";
    case SystemState::kTracking: return "tracking";
    case SystemState::kLost: return "lost";
  }
  return "?";
}

// Pose of a processed frame relative to the keyframe it was tracked against.
struct FrameRecord {
  int frame_id = -1;
  double timestamp = 0;
  int ref_kf = -1;
  SE3 ref_to_frame;  // reference camera -> frame camera
  bool tracked = false;
  bool keyframe = false;
  double rmse = 0;
};

struct TimingLog {
  std::vector<std::pair<int, double>> tracking_ms;  // (frame id, ms)
  std::vector<std::pair<int, double>> mapping_ms;   // (keyframe id, ms)

  static double mean(const std::vector<std::pair<int, double>>& v) {
    if (v.empty()) return 0;
    double s = 0;
    for (const auto& [id, ms] : v) s += ms;
    return s / static_cast<double>(v.size());
  }
};

// Odometry front end and back end. In deterministic mode every frame is
// tracked and mapped on the calling thread in order. Otherwise mapping runs
// on a worker thread and tracking uses the latest published reference.
class System {
 public:
  System(const CameraModel& cam, const PipelineConfig& cfg, bool deterministic = true)
      : cfg_(cfg), window_(cam), boot_(cam, cfg), deterministic_(deterministic) {
    if (!deterministic_) worker_ = std::thread([this] { mapping_loop(); });
  }
  ~System() { finish(); }
  System(const System&) = delete;
  System& operator=(const System&) = delete;

  SystemState state() const { return state_; }

  SystemState add_frame(std::shared_ptr<const Frame> f) {
    if (state_ == SystemState::kLost) {
      records_.push_back({f->id, f->timestamp, -1, SE3(), false, false, 0});
      return state_;
    }
    if (state_ == SystemState::kInitializing) {
      bootstrap_step(std::move(f));
      return state_;
    }
    track(std::move(f));
    return state_;
  }

  // Waits for pending mapping work and stops the worker.
  void finish() {
    if (!worker_.joinable()) return;
    {
      std::lock_guard lk(queue_mutex_);
      stop_ = true;
    }
    queue_cv_.notify_all();
    worker_.join();
  }

  // Camera-to-world poses of every tracked frame.
  Trajectory trajectory() const {
    std::lock_guard lk(map_mutex_);
    Trajectory t;
    for (const auto& r : records_) {
      if (!r.tracked) continue;
      auto it = kf_poses_.find(r.ref_kf);
      if (it == kf_poses_.end()) continue;
      t.push_back(r.timestamp, (r.ref_to_frame * it->second).inverse());
    }
    return t;
  }

  const std::vector<FrameRecord>& records() const { return records_; }
  TimingLog timing() const {
    std::lock_guard lk(map_mutex_);
    return timing_;
  }
  int num_keyframes() const { return num_keyframes_; }
  // Only meaningful when no mapping work is in flight.
  const Window& window() const { return window_; }
  const std::vector<Candidate>& candidates() const { return candidates_; }
  std::size_t max_window_size() const { return max_window_; }

 private:
  using Clock = std::chrono::steady_clock;
  static double ms_since(Clock::time_point t0) {
    return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
  }

  struct MapJob {
    std::shared_ptr<const Frame> frame;
    SE3 pose;
    AffineBrightness affine;
    bool keyframe = false;
  };

  // ---- initialization
  void bootstrap_step(std::shared_ptr<const Frame> f) {
    if (!boot_.has_first()) {
      boot_.reset(f);
      pending_.clear();
      records_.push_back({f->id, f->timestamp, f->id, SE3(), false, false, 0});
      return;
    }
    const auto t0 = Clock::now();
    const auto res = boot_.add(*f);
    if (!res.success) {
      records_.push_back({f->id, f->timestamp, -1, res.rel, false, false, res.rmse});
      pending_.push_back(f);
      // A first frame without enough structure is replaced right away.
      if (boot_.frames_tried() >= cfg_.bootstrap_max_frames || boot_.points().size() < 50) {
        boot_.reset(f);
        pending_.clear();
        records_.back().ref_kf = f->id;
      }
      return;
    }
    initialize(f, res);
    std::lock_guard lk(map_mutex_);
    timing_.mapping_ms.emplace_back(f->id, ms_since(t0));
  }

  void initialize(const std::shared_ptr<const Frame>& f, const BootstrapResult& res) {
    const auto& first = boot_.first();
    {
      std::lock_guard lk(map_mutex_);
      window_.add_keyframe(first->id, first, SE3(), {});
      window_.add_keyframe(f->id, f, res.rel, res.affine);
      const ImageLevel& l0 = first->pyramid.level(0);
      for (const auto& p : boot_.points()) {
        if (!p.good) continue;
        auto patch = make_host_patch(l0, p.pixel);
        if (patch) window_.add_point(first->id, *patch, p.inv_dist);
      }
      optimize_window(window_, cfg_.optimizer);
      remove_outliers(window_);
      auto fresh = select_candidates(f->id, *f, window_.camera(), cfg_);
      candidates_.insert(candidates_.end(), fresh.begin(), fresh.end());
      store_keyframe_poses();
      num_keyframes_ = 2;
      max_window_ = 2;
    }
    // Frames between the two keyframes are re-aligned to the first one.
    const auto ref0 = make_tracking_reference(*first, window_.camera(), window_.keyframes()[0].pose, {},
                                              depth_map_of(first->id), first->id);
    std::size_t ri = 0;
    while (ri < records_.size() && records_[ri].frame_id != first->id) ++ri;
    if (ri < records_.size()) {
      records_[ri].tracked = true;
      records_[ri].keyframe = true;
    }
    for (const auto& pf : pending_) {
      for (auto& r : records_) {
        if (r.frame_id != pf->id) continue;
        SE3 guess = r.ref_to_frame;
        guess.translation() *= boot_.normalization();
        const auto tr = align_frame(ref0, *pf, guess, {}, cfg_);
        if (tr.ok) {
          r.ref_kf = first->id;
          r.ref_to_frame = tr.rel;
          r.tracked = true;
          r.rmse = tr.rmse;
        }
      }
    }
    pending_.clear();
    records_.push_back({f->id, f->timestamp, f->id, SE3(), true, true, res.rmse});
    publish_reference();
    last_affine_ = res.affine;
    state_ = SystemState::kTracking;
  }

  // ---- tracking
  void track(std::shared_ptr<const Frame> f) {
    const auto t0 = Clock::now();
    std::shared_ptr<const TrackingReference> ref;
    std::map<int, SE3> poses;
    {
      std::lock_guard lk(map_mutex_);
      ref = reference_;
      poses = kf_poses_;
    }
    std::vector<SE3> recent;
    for (auto it = records_.rbegin(); it != records_.rend() && recent.size() < 2; ++it) {
      if (!it->tracked) break;
      auto p = poses.find(it->ref_kf);
      if (p == poses.end()) break;
      recent.push_back(it->ref_to_frame * p->second);
    }
    std::vector<SE3> inits;
    if (recent.empty())
      inits.push_back(SE3());
    else
      inits = motion_initializers(ref->pose, recent[0], recent.size() > 1 ? std::optional<SE3>(recent[1]) : std::nullopt);
    const auto tr = track_frame(*ref, *f, inits, last_affine_, cfg_, last_rmse_);
    if (!tr.ok) {
      state_ = SystemState::kLost;
      records_.push_back({f->id, f->timestamp, -1, SE3(), false, false, tr.rmse});
      return;
    }
    last_rmse_ = tr.rmse;
    last_affine_ = tr.affine;
    const auto fs = flow_stats(*ref, tr.rel, f->exposure(), tr.affine);
    const bool kf = need_keyframe(fs, ref->camera.width, ref->camera.height, cfg_);
    records_.push_back({f->id, f->timestamp, ref->kf_id, tr.rel, true, kf, tr.rmse});
    {
      std::lock_guard lk(map_mutex_);
      timing_.tracking_ms.emplace_back(f->id, ms_since(t0));
    }
    MapJob job{f, tr.rel * ref->pose, tr.affine, kf};
    if (kf) ++num_keyframes_;
    if (deterministic_) {
      map(job);
    } else {
      {
        std::lock_guard lk(queue_mutex_);
        queue_.push_back(std::move(job));
      }
      queue_cv_.notify_one();
    }
  }

  // ---- mapping
  void mapping_loop() {
    for (;;) {
      MapJob job;
      {
        std::unique_lock lk(queue_mutex_);
        queue_cv_.wait(lk, [&] { return stop_ || !queue_.empty(); });
        if (queue_.empty()) return;
        // Under load, non-keyframes are skipped in favour of the next keyframe.
        while (queue_.size() > 1 && !queue_.front().keyframe) queue_.pop_front();
        job = std::move(queue_.front());
        queue_.pop_front();
      }
      map(job);
    }
  }

  void map(const MapJob& job) {
    const auto t0 = Clock::now();
    std::unique_lock lk(map_mutex_);
    refine_candidates(window_, candidates_, *job.frame, job.pose, job.affine, cfg_);
    if (!job.keyframe) return;
    const int id = job.frame->id;
    window_.add_keyframe(id, job.frame, job.pose, job.affine);
    max_window_ = std::max(max_window_, static_cast<std::size_t>(window_.size()));
    activate_candidates(window_, candidates_, cfg_);
    optimize_window(window_, cfg_.optimizer);
    remove_outliers(window_);
    marginalize_points(window_, points_to_marginalize(window_), cfg_.optimizer);
    for (int drop : marginalize_policy(window_, cfg_)) {
      store_keyframe_poses();
      marginalize_frame(window_, drop, cfg_.optimizer);
      std::erase_if(candidates_, [&](const Candidate& c) { return c.host_kf == drop; });
    }
    auto fresh = select_candidates(id, *job.frame, window_.camera(), cfg_);
    candidates_.insert(candidates_.end(), fresh.begin(), fresh.end());
    store_keyframe_poses();
    publish_reference();
    timing_.mapping_ms.emplace_back(id, ms_since(t0));
  }

  std::vector<DepthSample> depth_map_of(int kf_id) const {
    std::vector<DepthSample> out;
    const auto& kf = window_.keyframe(kf_id);
    for (const auto& p : kf.points) out.push_back({p.patch.pixel, p.inv_dist});
    return out;
  }

  // Caller holds map_mutex_ or runs single-threaded.
  void store_keyframe_poses() {
    for (const auto& kf : window_.keyframes()) kf_poses_[kf.kf_id] = kf.pose;
  }

  void publish_reference() {
    const auto& latest = window_.keyframes().back();
    auto ref = std::make_shared<TrackingReference>(make_tracking_reference(
        *latest.frame, window_.camera(), latest.pose, latest.affine, window_depth_map(window_), latest.kf_id));
    reference_ = std::move(ref);
  }

  PipelineConfig cfg_;
  Window window_;
  Bootstrapper boot_;
  bool deterministic_ = true;
  SystemState state_ = SystemState::kInitializing;

  std::vector<Candidate> candidates_;
  std::vector<std::shared_ptr<const Frame>> pending_;
  std::vector<FrameRecord> records_;
  std::map<int, SE3> kf_poses_;
  std::shared_ptr<const TrackingReference> reference_;
  AffineBrightness last_affine_;
  double last_rmse_ = std::numeric_limits<double>::infinity();
  TimingLog timing_;
  int num_keyframes_ = 0;
  std::size_t max_window_ = 0;

  mutable std::mutex map_mutex_;
  std::mutex queue_mutex_;
  std::condition_variable queue_cv_;
  std::deque<MapJob> queue_;
  bool stop_ = false;
  std::thread worker_;
};

}  // namespace omnivo
