// omnivo: run, evaluate and ablate the omnidirectional odometry on datasets.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <future>
#include <iostream>
#include <set>

#include "omnivo/eval.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace omnivo;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitLost = 2;
constexpr int kExitIo = 3;
constexpr int kExitConfig = 4;

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct RunConfig {
  std::string dataset;
  std::string camera = "omni";
  int runs = 5;
  std::uint64_t seed = 0;
  bool deterministic = false;
  int parallel_runs = 1;
  std::string out = "omnivo_out";
  bool quiet = false;
  PipelineConfig pipeline;
};

// Pipeline settings that a config file may override.
void apply_pipeline_key(PipelineConfig& p, const std::string& key, const json& v) {
  if (key == "nf") p.nf = v.get<int>();
  else if (key == "visibility_min") p.visibility_min = v.get<double>();
  else if (key == "candidate_count") p.candidate_count = v.get<int>();
  else if (key == "activation_target") p.activation_target = v.get<int>();
  else if (key == "track_max_rmse") p.track_max_rmse = v.get<double>();
  else if (key == "track_min_points") p.track_min_points = v.get<int>();
  else if (key == "kf_flow_weight") p.kf_flow_weight = v.get<double>();
  else if (key == "kf_translation_weight") p.kf_translation_weight = v.get<double>();
  else if (key == "kf_affine_weight") p.kf_affine_weight = v.get<double>();
  else if (key == "bootstrap_max_frames") p.bootstrap_max_frames = v.get<int>();
  else if (key == "optimizer_iterations") p.optimizer.max_iterations = v.get<int>();
  else if (key == "optimize_intrinsics") p.optimizer.optimize_intrinsics = v.get<bool>();
  else throw ConfigError("unknown config key `" + key + "`");
}

// Reads a JSON config file into `rc`. Keys set on the command line are
// applied afterwards by the caller, so flags win.
void load_config(const std::string& path, RunConfig& rc) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(path + ": " + e.what());
  }
  if (!j.is_object()) throw ConfigError(path + ": expected a JSON object");
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "dataset") rc.dataset = v.get<std::string>();
      else if (key == "camera") rc.camera = v.get<std::string>();
      else if (key == "runs") rc.runs = v.get<int>();
      else if (key == "seed") rc.seed = v.get<std::uint64_t>();
      else if (key == "deterministic") rc.deterministic = v.get<bool>();
      else if (key == "parallel_runs") rc.parallel_runs = v.get<int>();
      else if (key == "out") rc.out = v.get<std::string>();
      else if (key == "pipeline") {
        if (!v.is_object()) throw ConfigError("`pipeline` must be an object");
        for (const auto& [k2, v2] : v.items()) apply_pipeline_key(rc.pipeline, k2, v2);
      } else apply_pipeline_key(rc.pipeline, key, v);
    }
  } catch (const json::type_error& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

void validate(const RunConfig& rc) {
  if (rc.camera != "omni" && rc.camera != "pinhole-crop") throw ConfigError("--camera must be omni or pinhole-crop");
  if (rc.pipeline.nf < 3 || rc.pipeline.nf > 10) throw ConfigError("--nf must be in 3..10");
  if (rc.runs < 1) throw ConfigError("--runs must be at least 1");
  if (rc.parallel_runs < 1) throw ConfigError("--parallel-runs must be at least 1");
  if (rc.parallel_runs > 1 && rc.deterministic)
    throw ConfigError("--parallel-runs is only available without --deterministic");
  if (!(rc.pipeline.visibility_min > 0 && rc.pipeline.visibility_min < 1))
    throw ConfigError("visibility_min must be in (0, 1)");
  if (rc.dataset.empty()) throw ConfigError("--dataset is required");
}

synth::Dataset open_dataset(const std::string& path, const std::string& camera) {
  synth::LoadOptions lo;
  lo.mode = camera == "pinhole-crop" ? synth::CameraMode::kPinholeCrop : synth::CameraMode::kOmni;
  try {
    return synth::Dataset::open(path, lo);
  } catch (const synth::SynthError& e) {
    throw IoError(e.what());
  }
}

double mean_of(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

json num(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

json metrics_json(const eval::RunMetrics& m) {
  json j;
  j["rmse"] = num(m.rmse);
  j["tracked_rmse"] = num(m.tracked_rmse);
  j["status"] = eval::to_string(m.status);
  j["coverage"] = m.coverage();
  j["tracked_frames"] = m.tracked_frames;
  j["frames"] = m.frames;
  j["keyframes"] = m.keyframes;
  j["tracking_ms"] = m.track_ms;
  j["mapping_ms"] = m.map_ms;
  if (!m.note.empty()) j["note"] = m.note;
  return j;
}

// Writes report.json, rmse.csv and trajectory_topdown.svg for a set of runs.
json write_report(const fs::path& out, const std::vector<eval::RunMetrics>& runs, const std::vector<Trajectory>& trajs,
                  const Trajectory& gt, const json& meta) {
  json rep = meta;
  std::vector<double> rmses, track, map, kfs;
  json per_run = json::array();
  for (std::size_t i = 0; i < runs.size(); ++i) {
    json r{{"run", i}};
    r.update(metrics_json(runs[i]));
    per_run.push_back(r);
    rmses.push_back(runs[i].rmse);
    track.push_back(runs[i].track_ms);
    map.push_back(runs[i].map_ms);
    kfs.push_back(runs[i].keyframes);
  }
  rep["runs"] = per_run;
  rep["rmse"] = [&] {
    json a = json::array();
    for (double v : rmses) a.push_back(num(v));
    return a;
  }();
  rep["median_rmse"] = num(eval::median(rmses));
  rep["trajectory_length"] = gt.length();
  rep["median_rmse_relative"] = num(eval::median(rmses) / gt.length());
  rep["mean_tracking_ms"] = mean_of(track);
  rep["mean_mapping_ms"] = mean_of(map);
  rep["median_keyframes"] = num(eval::median(kfs));
  bool all_ok = true;
  for (const auto& r : runs) all_ok = all_ok && r.status == eval::RunStatus::kOk;
  rep["status"] = all_ok ? "ok" : "lost";

  std::error_code ec;
  fs::create_directories(out, ec);
  std::ofstream jf(out / "report.json");
  if (!jf) throw IoError("cannot write " + (out / "report.json").string());
  jf << rep.dump(2) << "\n";

  std::ofstream csv(out / "rmse.csv");
  if (!csv) throw IoError("cannot write " + (out / "rmse.csv").string());
  csv << "run,rmse,tracked_rmse,coverage,status\n" << std::setprecision(9);
  for (std::size_t i = 0; i < runs.size(); ++i)
    csv << i << "," << runs[i].rmse << "," << runs[i].tracked_rmse << "," << runs[i].coverage() << ","
        << eval::to_string(runs[i].status) << "\n";

  std::vector<std::string> labels;
  for (std::size_t i = 0; i < trajs.size(); ++i) labels.push_back("run " + std::to_string(i));
  std::ofstream svg(out / "trajectory_topdown.svg");
  if (!svg) throw IoError("cannot write " + (out / "trajectory_topdown.svg").string());
  svg << eval::topdown_svg(gt, trajs, labels);
  return rep;
}

struct RunSetResult {
  std::vector<eval::RunOutput> outputs;
  bool lost = false;
};

RunSetResult run_set(const RunConfig& rc, const fs::path& out) {
  const auto ds = open_dataset(rc.dataset, rc.camera);
  RunSetResult res;
  res.outputs.resize(static_cast<std::size_t>(rc.runs));
  auto one = [&](int k) {
    auto progress = [&](std::size_t i, SystemState s) {
      if (!rc.quiet && (i % 25 == 0 || s == SystemState::kLost))
        std::fprintf(stderr, "run %d frame %zu/%zu %s\n", k, i, ds.size(), to_string(s));
    };
    return eval::run_sequence(ds, rc.pipeline, rc.deterministic, progress);
  };
  for (int k = 0; k < rc.runs;) {
    std::vector<std::future<eval::RunOutput>> batch;
    const int n = std::min(rc.parallel_runs, rc.runs - k);
    for (int m = 0; m < n; ++m) batch.push_back(std::async(n > 1 ? std::launch::async : std::launch::deferred, one, k + m));
    for (int m = 0; m < n; ++m) res.outputs[static_cast<std::size_t>(k + m)] = batch[static_cast<std::size_t>(m)].get();
    k += n;
  }
  for (std::size_t k = 0; k < res.outputs.size(); ++k) {
    const auto& o = res.outputs[k];
    const fs::path dir = out / ("run_" + std::to_string(k));
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
    try {
      write_tum(dir / "traj.txt", o.trajectory);
      eval::write_timing_csv(dir / "timing.csv", o.timing);
    } catch (const std::exception& e) {
      throw IoError(e.what());
    }
    json st{{"status", eval::to_string(o.status)},
            {"frames", o.timestamps.size()},
            {"tracked_frames", o.trajectory.size()},
            {"keyframes", o.keyframes},
            {"lost_frame", o.lost_frame >= 0 ? json(o.lost_frame) : json(nullptr)},
            {"max_window", o.max_window}};
    std::ofstream sf(dir / "status.json");
    if (!sf) throw IoError("cannot write " + (dir / "status.json").string());
    sf << st.dump(2) << "\n";
    if (o.status != eval::RunStatus::kOk) res.lost = true;
  }
  return res;
}

json run_meta(const RunConfig& rc) {
  return json{{"dataset", rc.dataset},     {"camera", rc.camera}, {"nf", rc.pipeline.nf},
              {"run_count", rc.runs},      {"seed", rc.seed},     {"deterministic", rc.deterministic}};
}

// ---------------------------------------------------------------------------
// Subcommands

int cmd_run(const RunConfig& rc) {
  validate(rc);
  const fs::path out = rc.out;
  const auto res = run_set(rc, out);
  const auto ds = open_dataset(rc.dataset, rc.camera);
  if (ds.groundtruth()) {
    std::vector<eval::RunMetrics> metrics;
    std::vector<Trajectory> trajs;
    for (const auto& o : res.outputs) {
      metrics.push_back(eval::evaluate(o, *ds.groundtruth()));
      trajs.push_back(o.trajectory);
    }
    const json rep = write_report(out, metrics, trajs, *ds.groundtruth(), run_meta(rc));
    std::printf("median RMSE %s m over %d run(s), trajectory length %.3f m, tracking %.1f ms, mapping %.1f ms\n",
                rep["median_rmse"].is_null() ? "n/a" : std::to_string(rep["median_rmse"].get<double>()).c_str(),
                rc.runs, rep["trajectory_length"].get<double>(), rep["mean_tracking_ms"].get<double>(),
                rep["mean_mapping_ms"].get<double>());
  }
  for (std::size_t k = 0; k < res.outputs.size(); ++k)
    std::printf("run %zu: %s, %zu/%zu frames tracked, %d keyframes -> %s\n", k,
                eval::to_string(res.outputs[k].status), res.outputs[k].trajectory.size(),
                res.outputs[k].timestamps.size(), res.outputs[k].keyframes,
                (out / ("run_" + std::to_string(k)) / "traj.txt").string().c_str());
  return res.lost ? kExitLost : kExitOk;
}

struct EvalArgs {
  std::vector<std::string> trajs;
  std::string run_dir;
  std::string gt;
  std::string dataset;
  std::string out;
};

int cmd_eval(const EvalArgs& a) {
  std::vector<fs::path> traj_paths(a.trajs.begin(), a.trajs.end());
  if (!a.run_dir.empty()) {
    std::set<fs::path> found;
    std::error_code ec;
    for (const auto& e : fs::directory_iterator(a.run_dir, ec))
      if (e.is_directory() && e.path().filename().string().rfind("run_", 0) == 0 && fs::exists(e.path() / "traj.txt"))
        found.insert(e.path() / "traj.txt");
    if (ec) throw IoError("cannot read " + a.run_dir + ": " + ec.message());
    traj_paths.insert(traj_paths.end(), found.begin(), found.end());
  }
  if (traj_paths.empty()) throw ConfigError("nothing to evaluate: give --traj or --run-dir");
  Trajectory gt;
  std::vector<double> timestamps;
  try {
    if (!a.gt.empty()) {
      gt = read_tum(a.gt);
    } else if (!a.dataset.empty()) {
      const auto ds = open_dataset(a.dataset, "omni");
      if (!ds.groundtruth()) throw IoError(a.dataset + " has no ground truth");
      gt = *ds.groundtruth();
      for (std::size_t i = 0; i < ds.size(); ++i) timestamps.push_back(ds.time(i).timestamp);
    } else {
      throw ConfigError("give --gt or --dataset");
    }
  } catch (const TrajectoryError& e) {
    throw IoError(e.what());
  }
  if (timestamps.empty())
    for (const auto& s : gt) timestamps.push_back(s.timestamp);

  std::vector<eval::RunMetrics> metrics;
  std::vector<Trajectory> trajs;
  for (const auto& p : traj_paths) {
    Trajectory t;
    try {
      t = read_tum(p);
    } catch (const TrajectoryError& e) {
      throw IoError(e.what());
    }
    auto status = eval::RunStatus::kOk;
    if (fs::exists(p.parent_path() / "status.json")) {
      std::ifstream sf(p.parent_path() / "status.json");
      const auto st = json::parse(sf, nullptr, false);
      if (st.is_object() && st.value("status", "ok") == "lost") status = eval::RunStatus::kLost;
      if (st.is_object() && st.value("status", "ok") == "not_initialized") status = eval::RunStatus::kNotInitialized;
    }
    auto m = eval::evaluate(t, gt, timestamps, status);
    if (fs::exists(p.parent_path() / "timing.csv")) {
      try {
        const auto tl = eval::read_timing_csv(p.parent_path() / "timing.csv");
        m.track_ms = TimingLog::mean(tl.tracking_ms);
        m.map_ms = TimingLog::mean(tl.mapping_ms);
      } catch (const std::exception& e) {
        throw IoError(e.what());
      }
    }
    if (fs::exists(p.parent_path() / "status.json")) {
      std::ifstream sf(p.parent_path() / "status.json");
      const auto st = json::parse(sf, nullptr, false);
      if (st.is_object()) m.keyframes = st.value("keyframes", 0);
    }
    if (!m.note.empty() && !std::isfinite(m.rmse) && !std::isfinite(m.tracked_rmse))
      std::fprintf(stderr, "%s: %s\n", p.string().c_str(), m.note.c_str());
    metrics.push_back(m);
    trajs.push_back(t);
  }
  const fs::path out = a.out.empty() ? (a.run_dir.empty() ? fs::path(".") : fs::path(a.run_dir)) : fs::path(a.out);
  json meta{{"trajectories", [&] {
               json arr = json::array();
               for (const auto& p : traj_paths) arr.push_back(p.string());
               return arr;
             }()}};
  const json rep = write_report(out, metrics, trajs, gt, meta);
  for (std::size_t i = 0; i < metrics.size(); ++i)
    std::printf("%s: RMSE %.6f m (tracked %.6f m, coverage %.0f%%, %s)\n", traj_paths[i].string().c_str(),
                metrics[i].rmse, metrics[i].tracked_rmse, 100 * metrics[i].coverage(), eval::to_string(metrics[i].status));
  std::printf("median RMSE %s m, trajectory length %.3f m -> %s\n",
              rep["median_rmse"].is_null() ? "n/a" : std::to_string(rep["median_rmse"].get<double>()).c_str(),
              gt.length(), (out / "report.json").string().c_str());
  return kExitOk;
}

struct SynthArgs {
  std::string spec;
  std::string out;
  std::string model;
  std::optional<std::uint64_t> seed;
  int threads = 0;
};

int cmd_synth(const SynthArgs& a) {
  synth::SequenceSpec spec;
  try {
    spec = synth::read_spec(a.spec);
    if (!a.model.empty()) spec.model = a.model;
    if (a.seed) spec.seed = *a.seed;
    if (spec.model != "omni" && spec.model != "pinhole") throw synth::SynthError("model must be omni or pinhole");
    synth::validate(spec);
    synth::camera_for(spec);
  } catch (const synth::SynthError& e) {
    if (!fs::exists(a.spec)) throw IoError(e.what());
    throw ConfigError(e.what());
  }
  synth::GenerateSummary sum;
  try {
    sum = synth::generate_sequence(spec, a.out, a.threads);
  } catch (const synth::SynthError& e) {
    throw IoError(e.what());
  }
  const auto& c = sum.camera;
  std::printf("%d frames %dx%d, %s fx=%.3f fy=%.3f cx=%.3f cy=%.3f xi=%.3f, path length %.3f m, %.1f s -> %s\n",
              sum.frames, c.width, c.height, c.kind == CameraKind::kPinhole ? "pinhole" : "omni", c.intrinsics.fx,
              c.intrinsics.fy, c.intrinsics.cx, c.intrinsics.cy, c.intrinsics.xi, sum.path_length, sum.seconds,
              a.out.c_str());
  return kExitOk;
}

int cmd_ablate(RunConfig rc) {
  const std::vector<int> nfs = {7, 5, 3};
  const std::vector<std::string> cams = {"omni", "pinhole-crop"};
  std::vector<eval::AblationCell> cells;
  json rows = json::array();
  bool lost = false;
  const fs::path root = rc.out;
  for (const auto& cam : cams)
    for (int nf : nfs) {
      RunConfig c = rc;
      c.camera = cam;
      c.pipeline.nf = nf;
      validate(c);
      const fs::path out = root / (cam + "_kf" + std::to_string(nf));
      const auto res = run_set(c, out);
      const auto ds = open_dataset(c.dataset, cam);
      if (!ds.groundtruth()) throw IoError(c.dataset + " has no ground truth");
      std::vector<eval::RunMetrics> metrics;
      std::vector<Trajectory> trajs;
      std::vector<double> cov;
      for (const auto& o : res.outputs) {
        metrics.push_back(eval::evaluate(o, *ds.groundtruth()));
        trajs.push_back(o.trajectory);
        cov.push_back(metrics.back().coverage());
      }
      const json rep = write_report(out, metrics, trajs, *ds.groundtruth(), run_meta(c));
      eval::AblationCell cell{cam, nf, eval::median([&] {
                                std::vector<double> v;
                                for (const auto& m : metrics) v.push_back(m.rmse);
                                return v;
                              }()),
                              eval::median(cov)};
      cells.push_back(cell);
      rows.push_back(json{{"camera", cam},
                          {"nf", nf},
                          {"median_rmse", num(cell.rmse)},
                          {"median_coverage", cell.coverage},
                          {"mean_tracking_ms", rep["mean_tracking_ms"]},
                          {"mean_mapping_ms", rep["mean_mapping_ms"]},
                          {"status", rep["status"]}});
      lost = lost || res.lost;
      if (!rc.quiet) std::fprintf(stderr, "%s N_f=%d: median RMSE %.4f m\n", cam.c_str(), nf, cell.rmse);
    }
  json deltas = json::object();
  for (const auto& cam : cams)
    deltas[cam] = json{{"kf5_minus_kf7", num(eval::ablation_delta(cells, cam, 5))},
                       {"kf3_minus_kf7", num(eval::ablation_delta(cells, cam, 3))}};
  json rep{{"dataset", rc.dataset}, {"run_count", rc.runs}, {"deterministic", rc.deterministic}, {"cells", rows}, {"deltas", deltas}};
  std::ofstream jf(root / "ablation.json");
  if (!jf) throw IoError("cannot write " + (root / "ablation.json").string());
  jf << rep.dump(2) << "\n";
  std::ofstream csv(root / "ablation.csv");
  if (!csv) throw IoError("cannot write " + (root / "ablation.csv").string());
  csv << "camera,nf,median_rmse,median_coverage,delta_vs_kf7\n" << std::setprecision(9);
  for (const auto& c : cells)
    csv << c.camera << "," << c.nf << "," << c.rmse << "," << c.coverage << ","
        << (c.nf == 7 ? 0.0 : eval::ablation_delta(cells, c.camera, c.nf)) << "\n";
  const std::string table = eval::ablation_table(cells, nfs);
  std::ofstream tf(root / "ablation.txt");
  tf << table;
  std::printf("%s", table.c_str());
  // Every cell is still reported; a lost run only changes the exit status.
  return lost ? kExitLost : kExitOk;
}

void add_run_options(CLI::App* sub, RunConfig& rc, std::string& config, std::map<std::string, CLI::Option*>& opts) {
  opts["dataset"] = sub->add_option("--dataset", rc.dataset, "Dataset directory (images/, times.txt, camera.txt)");
  opts["camera"] = sub->add_option("--camera", rc.camera, "Camera model: omni or pinhole-crop");
  opts["nf"] = sub->add_option("--nf", rc.pipeline.nf, "Maximum number of active keyframes (3..10)");
  opts["runs"] = sub->add_option("--runs", rc.runs, "Number of repetitions");
  opts["seed"] = sub->add_option("--seed", rc.seed, "Seed recorded in the report (the pipeline draws no random numbers)");
  opts["deterministic"] = sub->add_flag("--deterministic", rc.deterministic, "Map every frame inline on one thread");
  opts["out"] = sub->add_option("--out", rc.out, "Output directory");
  opts["parallel_runs"] = sub->add_option("--parallel-runs", rc.parallel_runs, "Concurrent repetitions (non-deterministic only)");
  sub->add_option("--config", config, "JSON config file; command-line flags take precedence");
  sub->add_flag("--quiet", rc.quiet, "No progress output");
}

// Loads the config file, then re-applies every flag given on the command line.
RunConfig resolve(const RunConfig& flags, const std::string& config, const std::map<std::string, CLI::Option*>& opts) {
  if (config.empty()) return flags;
  RunConfig rc;
  load_config(config, rc);
  auto given = [&](const char* k) { return opts.at(k)->count() > 0; };
  if (given("dataset")) rc.dataset = flags.dataset;
  if (given("camera")) rc.camera = flags.camera;
  if (given("nf")) rc.pipeline.nf = flags.pipeline.nf;
  if (given("runs")) rc.runs = flags.runs;
  if (given("seed")) rc.seed = flags.seed;
  if (given("deterministic")) rc.deterministic = flags.deterministic;
  if (given("out")) rc.out = flags.out;
  if (given("parallel_runs")) rc.parallel_runs = flags.parallel_runs;
  rc.quiet = flags.quiet;
  return rc;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Direct sparse odometry with a unified omnidirectional camera model"};
  app.require_subcommand(1);

  RunConfig run_flags;
  std::string run_config;
  std::map<std::string, CLI::Option*> run_opts;
  auto* run = app.add_subcommand("run", "Run the odometry over a dataset; writes run_k/traj.txt and timing.csv");
  add_run_options(run, run_flags, run_config, run_opts);

  EvalArgs eval_args;
  auto* ev = app.add_subcommand("eval", "Sim(3)-align trajectories to ground truth; writes report.json, rmse.csv, SVG");
  ev->add_option("--traj", eval_args.trajs, "Trajectory file(s) in TUM format");
  ev->add_option("--run-dir", eval_args.run_dir, "Directory with run_k/traj.txt from `omnivo run`");
  ev->add_option("--gt", eval_args.gt, "Ground-truth trajectory (TUM format)");
  ev->add_option("--dataset", eval_args.dataset, "Dataset directory providing ground truth and frame times");
  ev->add_option("--out", eval_args.out, "Output directory (default: run dir or current directory)");

  SynthArgs synth_args;
  std::uint64_t synth_seed = 0;
  auto* sy = app.add_subcommand("synth", "Render a synthetic dataset from a key = value spec file");
  sy->add_option("spec", synth_args.spec, "Spec file")->required();
  sy->add_option("--out", synth_args.out, "Output dataset directory")->required();
  sy->add_option("--model", synth_args.model, "Override the camera model: omni or pinhole");
  auto* seed_opt = sy->add_option("--seed", synth_seed, "Override the texture seed");
  sy->add_option("--threads", synth_args.threads, "Render threads (0: all cores)");

  RunConfig ab_flags;
  std::string ab_config;
  std::map<std::string, CLI::Option*> ab_opts;
  auto* ab = app.add_subcommand("ablate", "Keyframe-count ablation: N_f in {7,5,3} for omni and pinhole-crop");
  add_run_options(ab, ab_flags, ab_config, ab_opts);
  ab_flags.runs = 1;

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (run->parsed()) return cmd_run(resolve(run_flags, run_config, run_opts));
    if (ev->parsed()) return cmd_eval(eval_args);
    if (sy->parsed()) {
      if (seed_opt->count()) synth_args.seed = synth_seed;
      return cmd_synth(synth_args);
    }
    if (ab->parsed()) return cmd_ablate(resolve(ab_flags, ab_config, ab_opts));
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfig;
  } catch (const IoError& e) {
    std::fprintf(stderr, "I/O error: %s\n", e.what());
    return kExitIo;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitIo;
  }
  return kExitOk;
}
