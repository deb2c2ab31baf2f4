#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "omnivo/geometry.hpp"
#include "omnivo/synth.hpp"
#include "omnivo/system.hpp"

namespace omnivo::eval {

// Running the odometry over a dataset and scoring the result against ground
// truth. Used by the command-line tool and the acceptance checks.

enum class RunStatus { kOk, kLost, kNotInitialized };

inline const char* to_string(RunStatus s) {
  switch (s) {
    case RunStatus::kOk: return "ok";
    case RunStatus::kLost: return "lost";
    case RunStatus::kNotInitialized: return "not_initialized";
  }
  return "?";
}

struct RunOutput {
  Trajectory trajectory;  // camera -> world, tracked frames only
  std::vector<double> timestamps;  // every frame of the sequence
  TimingLog timing;
  RunStatus status = RunStatus::kOk;
  int keyframes = 0;
  int lost_frame = -1;
  std::size_t max_window = 0;
};

using Progress = std::function<void(std::size_t index, SystemState state)>;

// Feeds every frame of `ds` to a fresh system. Frames after a tracking loss
// are not processed but still count toward the sequence. Deterministic runs
// load frames inline so no reader thread competes with the timed stages.
inline RunOutput run_sequence(const synth::Dataset& ds, const PipelineConfig& cfg, bool deterministic,
                              const Progress& progress = {}) {
  RunOutput out;
  System sys(ds.camera(), cfg, deterministic);
  for (std::size_t i = 0; i < ds.size(); ++i) out.timestamps.push_back(ds.time(i).timestamp);
  std::optional<synth::FrameStream> stream;
  if (!deterministic) stream.emplace(ds);
  auto next = [&](std::size_t i) -> std::optional<Frame> {
    if (stream) return stream->next();
    if (i >= ds.size()) return std::nullopt;
    return ds.load_frame(i);
  };
  std::size_t i = 0;
  while (auto f = next(i)) {
    const auto state = sys.add_frame(std::make_shared<const Frame>(std::move(*f)));
    if (progress) progress(i, state);
    if (state == SystemState::kLost) {
      out.lost_frame = static_cast<int>(i);
      break;
    }
    ++i;
  }
  sys.finish();
  out.trajectory = sys.trajectory();
  out.timing = sys.timing();
  out.keyframes = sys.num_keyframes();
  out.max_window = sys.max_window_size();
  if (out.lost_frame >= 0)
    out.status = RunStatus::kLost;
  else if (out.trajectory.empty())
    out.status = RunStatus::kNotInitialized;
  return out;
}

// Trajectory over all `timestamps`: frames without an estimate hold the last
// estimated pose, frames before the first estimate hold the first one.
inline Trajectory hold_last_pose(const Trajectory& traj, const std::vector<double>& timestamps) {
  Trajectory full;
  if (traj.empty()) return full;
  std::size_t j = 0;
  SE3 held = traj[0].pose;
  for (double t : timestamps) {
    while (j < traj.size() && traj[j].timestamp <= t + 1e-9) held = traj[j++].pose;
    full.push_back(t, held);
  }
  return full;
}

inline constexpr double kNoValue = std::numeric_limits<double>::infinity();

struct RunMetrics {
  double rmse = kNoValue;          // whole sequence, untracked frames hold the last pose
  double tracked_rmse = kNoValue;  // tracked frames only
  std::size_t tracked_frames = 0;
  std::size_t frames = 0;
  double length = 0;  // ground-truth path length (m)
  double track_ms = 0;
  double map_ms = 0;
  int keyframes = 0;
  RunStatus status = RunStatus::kOk;
  std::string note;  // alignment failure, if any

  double coverage() const { return frames ? static_cast<double>(tracked_frames) / static_cast<double>(frames) : 0.0; }
};

inline RunMetrics evaluate(const Trajectory& est, const Trajectory& gt, const std::vector<double>& timestamps,
                           RunStatus status = RunStatus::kOk) {
  RunMetrics m;
  m.status = status;
  m.frames = timestamps.size();
  m.tracked_frames = est.size();
  m.length = gt.length();
  try {
    m.tracked_rmse = sim3_align(est, gt).rmse;
  } catch (const AlignmentError& e) {
    m.note = e.what();
  }
  try {
    m.rmse = sim3_align(hold_last_pose(est, timestamps), gt).rmse;
  } catch (const AlignmentError& e) {
    if (m.note.empty()) m.note = e.what();
  }
  return m;
}

inline RunMetrics evaluate(const RunOutput& run, const Trajectory& gt) {
  RunMetrics m = evaluate(run.trajectory, gt, run.timestamps, run.status);
  m.track_ms = TimingLog::mean(run.timing.tracking_ms);
  m.map_ms = TimingLog::mean(run.timing.mapping_ms);
  m.keyframes = run.keyframes;
  return m;
}

// Middle value of the sorted list; mean of the two middle values for an even
// count.
inline double median(std::vector<double> v) {
  if (v.empty()) return kNoValue;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// ---------------------------------------------------------------------------
// Files

inline void write_timing_csv(const std::filesystem::path& path, const TimingLog& t) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "kind,id,ms\n" << std::setprecision(6);
  for (const auto& [id, ms] : t.tracking_ms) out << "tracking," << id << "," << ms << "\n";
  for (const auto& [id, ms] : t.mapping_ms) out << "mapping," << id << "," << ms << "\n";
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

inline TimingLog read_timing_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  TimingLog t;
  std::string line;
  std::getline(in, line);
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string kind, id, ms;
    if (!std::getline(ss, kind, ',') || !std::getline(ss, id, ',') || !std::getline(ss, ms))
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": expected `kind,id,ms`");
    auto& dst = kind == "tracking" ? t.tracking_ms : t.mapping_ms;
    dst.emplace_back(std::stoi(id), std::stod(ms));
  }
  return t;
}

// Top view of ground truth and the aligned estimate. The plotted plane is
// spanned by the two axes along which ground truth extends most.
inline std::string topdown_svg(const Trajectory& gt, const std::vector<Trajectory>& estimates,
                               const std::vector<std::string>& labels = {}) {
  std::array<int, 2> ax{0, 2};
  if (!gt.empty()) {
    Vec3 lo = gt[0].pose.translation(), hi = lo;
    for (const auto& s : gt) {
      lo = lo.cwiseMin(s.pose.translation());
      hi = hi.cwiseMax(s.pose.translation());
    }
    const Vec3 ext = hi - lo;
    int drop = 0;
    for (int k = 1; k < 3; ++k)
      if (ext[k] < ext[drop]) drop = k;
    ax = drop == 0 ? std::array<int, 2>{1, 2} : drop == 1 ? std::array<int, 2>{0, 2} : std::array<int, 2>{0, 1};
  }
  std::vector<std::vector<Vec2>> paths;
  auto project = [&](const Trajectory& t, const std::optional<Sim3>& S) {
    std::vector<Vec2> p;
    for (const auto& s : t) {
      const Vec3 x = S ? Vec3(*S * s.pose.translation()) : s.pose.translation();
      p.emplace_back(x[ax[0]], x[ax[1]]);
    }
    return p;
  };
  paths.push_back(project(gt, std::nullopt));
  for (const auto& e : estimates) {
    try {
      paths.push_back(project(e, sim3_align(e, gt).transform));
    } catch (const AlignmentError&) {
      paths.emplace_back();
    }
  }
  Vec2 lo(kNoValue, kNoValue), hi(-kNoValue, -kNoValue);
  for (const auto& p : paths)
    for (const auto& x : p) {
      lo = lo.cwiseMin(x);
      hi = hi.cwiseMax(x);
    }
  if (!(lo.x() <= hi.x())) lo = hi = Vec2::Zero();
  const double size = 600, margin = 40;
  const double span = std::max({hi.x() - lo.x(), hi.y() - lo.y(), 1e-6});
  const double k = (size - 2 * margin) / span;
  auto sx = [&](const Vec2& x) { return margin + k * (x.x() - lo.x()); };
  auto sy = [&](const Vec2& x) { return size - margin - k * (x.y() - lo.y()); };
  static const char* colours[] = {"#d62728", "#1f77b4", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};
  const char* axis_names = "xyz";
  std::ostringstream o;
  o << std::fixed << std::setprecision(2);
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << size << "\" height=\"" << size + 30 << "\">\n";
  o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  for (std::size_t i = 0; i < paths.size(); ++i) {
    if (paths[i].empty()) continue;
    const char* colour = i == 0 ? "black" : colours[(i - 1) % 6];
    o << "<polyline fill=\"none\" stroke=\"" << colour << "\" stroke-width=\"" << (i == 0 ? 2.5 : 1.5)
      << "\"" << (i == 0 ? " stroke-dasharray=\"6,3\"" : "") << " points=\"";
    for (const auto& x : paths[i]) o << sx(x) << "," << sy(x) << " ";
    o << "\"/>\n";
  }
  o << "<text x=\"10\" y=\"" << size + 20 << "\" font-family=\"sans-serif\" font-size=\"13\">"
    << "black dashed: ground truth";
  for (std::size_t i = 1; i < paths.size(); ++i)
    o << "; " << colours[(i - 1) % 6] << ": " << (i - 1 < labels.size() ? labels[i - 1] : "run " + std::to_string(i - 1));
  o << "; plane " << axis_names[ax[0]] << "-" << axis_names[ax[1]] << ", scale " << std::setprecision(3)
    << span << " m</text>\n";
  o << "</svg>\n";
  return o.str();
}

// ---------------------------------------------------------------------------
// Keyframe ablation

struct AblationCell {
  std::string camera;  // omni | pinhole-crop
  int nf = 7;
  double rmse = kNoValue;  // median over runs
  double coverage = 0;
};

inline const AblationCell* find_cell(const std::vector<AblationCell>& cells, const std::string& camera, int nf) {
  for (const auto& c : cells)
    if (c.camera == camera && c.nf == nf) return &c;
  return nullptr;
}

// RMSE change of `nf` relative to `base` keyframes; NaN if either is missing.
inline double ablation_delta(const std::vector<AblationCell>& cells, const std::string& camera, int nf, int base = 7) {
  const auto* a = find_cell(cells, camera, nf);
  const auto* b = find_cell(cells, camera, base);
  if (!a || !b || !std::isfinite(a->rmse) || !std::isfinite(b->rmse)) return std::numeric_limits<double>::quiet_NaN();
  return a->rmse - b->rmse;
}

// Absolute RMSE per keyframe count, then the changes relative to N_f = 7.
inline std::string ablation_table(const std::vector<AblationCell>& cells, const std::vector<int>& nfs = {7, 5, 3}) {
  std::vector<std::string> cams;
  for (const auto& c : cells)
    if (std::find(cams.begin(), cams.end(), c.camera) == cams.end()) cams.push_back(c.camera);
  auto num = [](double v) {
    std::ostringstream s;
    if (std::isnan(v) || std::isinf(v))
      s << "-";
    else
      s << std::fixed << std::setprecision(4) << v;
    return s.str();
  };
  std::ostringstream o;
  o << "Absolute RMSE (m)\n" << std::left << std::setw(14) << "camera";
  for (int nf : nfs) o << std::right << std::setw(10) << ("Kf" + std::to_string(nf));
  o << "\n";
  for (const auto& cam : cams) {
    o << std::left << std::setw(14) << cam;
    for (int nf : nfs) {
      const auto* c = find_cell(cells, cam, nf);
      o << std::right << std::setw(10) << num(c ? c->rmse : kNoValue);
    }
    o << "\n";
  }
  o << "\nRMSE change (m)\n" << std::left << std::setw(14) << "camera";
  for (int nf : nfs)
    if (nf != 7) o << std::right << std::setw(10) << ("Kf" + std::to_string(nf) + "-Kf7");
  o << "\n";
  for (const auto& cam : cams) {
    o << std::left << std::setw(14) << cam;
    for (int nf : nfs)
      if (nf != 7) o << std::right << std::setw(10) << num(ablation_delta(cells, cam, nf));
    o << "\n";
  }
  return o.str();
}

}  // namespace omnivo::eval
