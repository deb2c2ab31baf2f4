#pragma once

#include <algorithm>
#include <array>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <deque>
#include <filesystem>
#include <fstream>
#include <future>
#include <iomanip>
#include <iostream>
#include <limits>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <tuple>
#include <vector>

#include "omnivo/camera.hpp"
#include "omnivo/geometry.hpp"
#include "omnivo/image.hpp"

namespace omnivo::synth {

class SynthError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Procedural texture. Integer hashing and IEEE arithmetic only.

inline std::uint64_t hash64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Uniform in [0, 1) from a lattice coordinate.
inline double lattice_value(std::int64_t ix, std::int64_t iy, std::int64_t iz, std::uint64_t seed) {
  std::uint64_t h = hash64(seed);
  h = hash64(h ^ static_cast<std::uint64_t>(ix));
  h = hash64(h ^ static_cast<std::uint64_t>(iy));
  h = hash64(h ^ static_cast<std::uint64_t>(iz));
  return static_cast<double>(h >> 11) * 0x1.0p-53;
}

struct ValueNoise {
  std::uint64_t seed = 1;
  double frequency = 6.0;  // lattice cells per metre, first octave
  int octaves = 3;

  // In [0, 1].
  double operator()(const Vec3& p) const {
    double sum = 0, norm = 0, amp = 1, freq = frequency;
    for (int o = 0; o < octaves; ++o) {
      sum += amp * octave(p * freq, seed + 0x1000193ULL * static_cast<std::uint64_t>(o));
      norm += amp;
      amp *= 0.5;
      freq *= 2.0;
    }
    return sum / norm;
  }

 private:
  static double smooth(double t) { return t * t * t * (t * (6.0 * t - 15.0) + 10.0); }

  static double octave(const Vec3& q, std::uint64_t s) {
    const double fx = std::floor(q.x()), fy = std::floor(q.y()), fz = std::floor(q.z());
    const auto ix = static_cast<std::int64_t>(fx), iy = static_cast<std::int64_t>(fy),
               iz = static_cast<std::int64_t>(fz);
    const double tx = smooth(q.x() - fx), ty = smooth(q.y() - fy), tz = smooth(q.z() - fz);
    double c[2][2];
    for (int dz = 0; dz < 2; ++dz)
      for (int dy = 0; dy < 2; ++dy) {
        const double a = lattice_value(ix, iy + dy, iz + dz, s), b = lattice_value(ix + 1, iy + dy, iz + dz, s);
        c[dz][dy] = a + (b - a) * tx;
      }
    const double y0 = c[0][0] + (c[0][1] - c[0][0]) * ty;
    const double y1 = c[1][0] + (c[1][1] - c[1][0]) * ty;
    return y0 + (y1 - y0) * tz;
  }
};

// Radiance = clamp(mean + amplitude (2 n - 1), 0, 255).
struct Surface {
  ValueNoise noise;
  double mean = 120;
  double amplitude = 110;

  double radiance(const Vec3& p) const { return std::clamp(mean + amplitude * (2.0 * noise(p) - 1.0), 0.0, 255.0); }
};

struct Sphere {
  Vec3 center = Vec3::Zero();
  double radius = 0.2;
  Surface surface;
};

enum Wall { kMinusX = 0, kPlusX, kMinusY, kPlusY, kMinusZ, kPlusZ };

inline const char* wall_name(int w) {
  static const char* names[] = {"-x", "+x", "-y", "+y", "-z", "+z"};
  return names[w];
}

struct Hit {
  double distance = 0;
  double radiance = 0;
};

// Interior of an axis-aligned box, optionally with spheres inside.
struct Scene {
  Vec3 room_min = Vec3(-2, -1.25, -2);
  Vec3 room_max = Vec3(2, 1.25, 2);
  std::array<Surface, 6> walls;
  std::vector<Sphere> spheres;

  bool contains(const Vec3& p, double margin = 0) const {
    return (p.array() > room_min.array() + margin).all() && (p.array() < room_max.array() - margin).all();
  }

  // Nearest surface along a unit direction from an interior origin.
  std::optional<Hit> intersect(const Vec3& o, const Vec3& dir) const {
    double best = std::numeric_limits<double>::infinity();
    const Surface* surf = nullptr;
    for (int a = 0; a < 3; ++a) {
      if (dir[a] == 0) continue;
      const bool pos = dir[a] > 0;
      const double t = ((pos ? room_max[a] : room_min[a]) - o[a]) / dir[a];
      if (t > 0 && t < best) {
        best = t;
        surf = &walls[static_cast<std::size_t>(2 * a + (pos ? 1 : 0))];
      }
    }
    for (const auto& s : spheres) {
      const Vec3 oc = o - s.center;
      const double b = oc.dot(dir);
      const double disc = b * b - (oc.squaredNorm() - s.radius * s.radius);
      if (disc < 0) continue;
      const double sq = std::sqrt(disc);
      const double t = -b - sq > 0 ? -b - sq : -b + sq;
      if (t > 0 && t < best) {
        best = t;
        surf = &s.surface;
      }
    }
    if (!surf) return std::nullopt;
    return Hit{best, surf->radiance(o + best * dir)};
  }
};

// ---------------------------------------------------------------------------
// Rendering.

struct RenderOptions {
  int supersample = 2;  // per axis
  double exposure = 1.0;
  double affine_a = 0;  // intensity = exposure * e^a * radiance + b
  double affine_b = 0;
  int threads = 0;  // 0: hardware concurrency
};

struct RenderResult {
  Image image;
  std::vector<float> inv_dist;  // per pixel, 0 where the centre ray is invalid
  std::vector<std::uint8_t> valid;

  float inv_dist_at(int x, int y) const { return inv_dist[static_cast<std::size_t>(y) * image.width() + x]; }
};

inline int worker_count(int requested) {
  if (requested > 0) return requested;
  return std::max(1, static_cast<int>(std::thread::hardware_concurrency()));
}

// Runs fn(row) for every row; rows are independent so the result does not
// depend on the thread count.
template <typename Fn>
void parallel_rows(int rows, int threads, Fn fn) {
  const int n = std::min(worker_count(threads), rows);
  if (n <= 1) {
    for (int y = 0; y < rows; ++y) fn(y);
    return;
  }
  std::vector<std::thread> pool;
  for (int t = 0; t < n; ++t)
    pool.emplace_back([&, t] {
      for (int y = t; y < rows; y += n) fn(y);
    });
  for (auto& th : pool) th.join();
}

// `T_wc` maps camera coordinates to world coordinates.
inline RenderResult render(const Scene& scene, const SE3& T_wc, const CameraModel& cam, const RenderOptions& opt = {}) {
  const int w = cam.width, h = cam.height;
  RenderResult out{Image(w, h, 0.f, opt.exposure), std::vector<float>(static_cast<std::size_t>(w) * h, 0.f),
                   std::vector<std::uint8_t>(static_cast<std::size_t>(w) * h, 0)};
  const Mat3 R = T_wc.rotation();
  const Vec3 o = T_wc.translation();
  const double gain = opt.exposure * std::exp(opt.affine_a);
  const int ss = std::max(1, opt.supersample);

  parallel_rows(h, opt.threads, [&](int y) {
    for (int x = 0; x < w; ++x) {
      const std::size_t idx = static_cast<std::size_t>(y) * w + x;
      const Vec2 centre(x, y);
      auto ray = cam.unit_ray(centre);
      if (!ray) continue;
      if (auto hit = scene.intersect(o, R * *ray)) out.inv_dist[idx] = static_cast<float>(1.0 / hit->distance);
      double sum = 0;
      int n = 0;
      for (int sy = 0; sy < ss; ++sy)
        for (int sx = 0; sx < ss; ++sx) {
          const Vec2 u(x + (sx + 0.5) / ss - 0.5, y + (sy + 0.5) / ss - 0.5);
          auto r = cam.unit_ray(u);
          if (!r) continue;
          if (auto hit = scene.intersect(o, R * *r)) {
            sum += hit->radiance;
            ++n;
          }
        }
      if (n == 0) continue;
      out.image(x, y) = static_cast<float>(std::clamp(gain * sum / n + opt.affine_b, 0.0, 255.0));
      out.valid[idx] = 1;
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Sequence description: `key = value` lines, `#` comments.

enum class PathKind { kLine, kCircle, kHandheld };
enum class LookMode { kOutward, kTangent, kFixed };

struct SequenceSpec {
  std::string model = "omni";
  int width = 480;
  int height = 480;
  double fov_deg = 185;
  double xi = 1.0;

  int frames = 100;
  double fps = 20;
  PathKind path = PathKind::kHandheld;
  LookMode look = LookMode::kOutward;
  Vec3 center = Vec3::Zero();
  double radius = 0.5;
  double arc_deg = 360;          // circle / handheld: swept angle
  Vec3 direction = Vec3(1, 0, 0);  // line
  double length = 1.0;           // line
  double jitter_translation = 0.01;
  double jitter_rotation = 0.01;  // radians

  Vec3 room = Vec3(4, 2.5, 4);
  std::uint64_t seed = 1;
  double texture_frequency = 6.0;
  double texture_amplitude = 110;
  std::vector<int> sparse_walls;
  double sparse_amplitude = 3;
  int spheres = 0;

  double exposure_min = 1.0;
  double exposure_max = 1.0;
  double exposure_period = 50;  // frames
  double affine_a = 0;          // per-frame a drawn uniformly from [-affine_a, affine_a]
  double affine_b = 0;
  int supersample = 2;
};

namespace detail {

// Shortest round-trip form, e.g. "185" or "92.5".
inline std::string format_number(double v) {
  std::ostringstream o;
  o << v;
  return o.str();
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, sep)) out.push_back(trim(tok));
  return out;
}

inline double to_double(const std::string& v) {
  double d = 0;
  const auto [end, ec] = std::from_chars(v.data(), v.data() + v.size(), d);
  if (ec == std::errc::result_out_of_range) throw std::out_of_range(v);
  if (ec != std::errc() || end != v.data() + v.size() || !std::isfinite(d)) throw std::invalid_argument("not a number");
  return d;
}

inline long long to_int(const std::string& v) {
  long long i = 0;
  const auto [end, ec] = std::from_chars(v.data(), v.data() + v.size(), i);
  if (ec == std::errc::result_out_of_range) throw std::out_of_range(v);
  if (ec != std::errc() || end != v.data() + v.size()) throw std::invalid_argument("not an integer");
  return i;
}

inline Vec3 to_vec3(const std::string& v) {
  const auto parts = split(v, ',');
  if (parts.size() != 3) throw std::invalid_argument("expected x,y,z");
  return Vec3(to_double(parts[0]), to_double(parts[1]), to_double(parts[2]));
}

inline int to_wall(const std::string& v) {
  for (int w = 0; w < 6; ++w)
    if (v == wall_name(w)) return w;
  throw std::invalid_argument("unknown wall `" + v + "` (use -x +x -y +y -z +z)");
}

}  // namespace detail

inline void validate(const SequenceSpec& s);

inline SequenceSpec parse_spec(std::istream& in, const std::string& name = "spec") {
  SequenceSpec s;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto where = name + ":" + std::to_string(lineno) + ": ";
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw SynthError(where + "expected `key = value`");
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string val = detail::trim(line.substr(eq + 1));
    try {
      if (key == "model") {
        if (val != "omni" && val != "pinhole") throw std::invalid_argument("model must be omni or pinhole");
        s.model = val;
      } else if (key == "width") s.width = static_cast<int>(detail::to_int(val));
      else if (key == "height") s.height = static_cast<int>(detail::to_int(val));
      else if (key == "fov") s.fov_deg = detail::to_double(val);
      else if (key == "xi") s.xi = detail::to_double(val);
      else if (key == "frames") s.frames = static_cast<int>(detail::to_int(val));
      else if (key == "fps") s.fps = detail::to_double(val);
      else if (key == "path") {
        if (val == "line") s.path = PathKind::kLine;
        else if (val == "circle") s.path = PathKind::kCircle;
        else if (val == "handheld") s.path = PathKind::kHandheld;
        else throw std::invalid_argument("path must be line, circle or handheld");
      } else if (key == "look") {
        if (val == "outward") s.look = LookMode::kOutward;
        else if (val == "tangent") s.look = LookMode::kTangent;
        else if (val == "fixed") s.look = LookMode::kFixed;
        else throw std::invalid_argument("look must be outward, tangent or fixed");
      } else if (key == "center") s.center = detail::to_vec3(val);
      else if (key == "radius") s.radius = detail::to_double(val);
      else if (key == "arc") s.arc_deg = detail::to_double(val);
      else if (key == "direction") s.direction = detail::to_vec3(val);
      else if (key == "length") s.length = detail::to_double(val);
      else if (key == "jitter_translation") s.jitter_translation = detail::to_double(val);
      else if (key == "jitter_rotation") s.jitter_rotation = detail::to_double(val);
      else if (key == "room") s.room = detail::to_vec3(val);
      else if (key == "seed") s.seed = static_cast<std::uint64_t>(detail::to_int(val));
      else if (key == "texture_frequency") s.texture_frequency = detail::to_double(val);
      else if (key == "texture_amplitude") s.texture_amplitude = detail::to_double(val);
      else if (key == "sparse_walls") {
        s.sparse_walls.clear();
        for (const auto& w : detail::split(val, ','))
          if (!w.empty()) s.sparse_walls.push_back(detail::to_wall(w));
      } else if (key == "sparse_amplitude") s.sparse_amplitude = detail::to_double(val);
      else if (key == "spheres") s.spheres = static_cast<int>(detail::to_int(val));
      else if (key == "exposure_min") s.exposure_min = detail::to_double(val);
      else if (key == "exposure_max") s.exposure_max = detail::to_double(val);
      else if (key == "exposure_period") s.exposure_period = detail::to_double(val);
      else if (key == "affine_a") s.affine_a = detail::to_double(val);
      else if (key == "affine_b") s.affine_b = detail::to_double(val);
      else if (key == "supersample") s.supersample = static_cast<int>(detail::to_int(val));
      else throw std::invalid_argument("unknown key `" + key + "`");
    } catch (const std::invalid_argument& e) {
      throw SynthError(where + key + ": " + e.what());
    } catch (const std::out_of_range&) {
      throw SynthError(where + key + ": value out of range");
    }
  }
  validate(s);
  return s;
}

inline SequenceSpec read_spec(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw SynthError("cannot open " + path.string());
  return parse_spec(in, path.string());
}

inline CameraModel camera_for(const SequenceSpec& s) {
  constexpr double kPi = 3.14159265358979323846;
  if (s.model == "pinhole") {
    if (!(s.fov_deg > 0 && s.fov_deg < 180))
      throw SynthError("a pinhole camera cannot cover a " + detail::format_number(s.fov_deg) +
                       " degree field of view; use model = omni for fields of view of 180 degrees or more");
    const double f = 0.5 * s.width / std::tan(0.5 * s.fov_deg * kPi / 180.0);
    return CameraModel::pinhole({f, f, 0.5 * (s.width - 1), 0.5 * (s.height - 1)}, s.width, s.height);
  }
  try {
    return omni_camera_for_fov(s.width, s.height, s.fov_deg, s.xi);
  } catch (const std::invalid_argument& e) {
    throw SynthError(e.what());
  }
}

inline Scene make_scene(const SequenceSpec& s) {
  Scene scene;
  scene.room_min = -0.5 * s.room;
  scene.room_max = 0.5 * s.room;
  // One 3D noise field for all walls keeps intensity continuous across the
  // room's edges, so corners do not form artificial step edges.
  for (int w = 0; w < 6; ++w) {
    auto& surf = scene.walls[static_cast<std::size_t>(w)];
    surf.noise = {hash64(s.seed), s.texture_frequency, 3};
    surf.amplitude = s.texture_amplitude;
    if (std::find(s.sparse_walls.begin(), s.sparse_walls.end(), w) != s.sparse_walls.end())
      surf.amplitude = s.sparse_amplitude;
  }
  // Spheres on a ring between the path and the walls.
  std::uint64_t h = hash64(s.seed ^ 0x5eedULL);
  const double ring = 0.5 * (s.radius + 0.5 * std::min(s.room.x(), s.room.z()));
  for (int i = 0; i < s.spheres; ++i) {
    h = hash64(h);
    const double u = static_cast<double>(h >> 11) * 0x1.0p-53;
    const double ang = 2 * 3.14159265358979323846 * (i + 0.5 * u) / s.spheres;
    Sphere sp;
    sp.radius = 0.15 + 0.1 * u;
    sp.center = s.center + Vec3(ring * std::cos(ang), 0.3 * (u - 0.5), ring * std::sin(ang));
    sp.surface.noise = {hash64(h + 7), 2 * s.texture_frequency, 3};
    sp.surface.amplitude = s.texture_amplitude;
    scene.spheres.push_back(sp);
  }
  return scene;
}

namespace detail {

// Camera-to-world rotation looking along `fwd` with image y pointing toward +y (down).
inline Mat3 look_rotation(const Vec3& fwd) {
  const Vec3 z = fwd.normalized();
  Vec3 y = Vec3(0, 1, 0) - z.y() * z;
  if (y.norm() < 1e-9) y = Vec3(0, 0, 1) - z.z() * z;
  y.normalize();
  const Vec3 x = y.cross(z);
  Mat3 R;
  R << x, y, z;
  return R;
}

}  // namespace detail

// Camera-to-world poses, one per frame.
inline std::vector<SE3> make_poses(const SequenceSpec& s) {
  constexpr double kPi = 3.14159265358979323846;
  std::vector<SE3> poses;
  // Jitter phases from the seed.
  double phase[12];
  std::uint64_t h = hash64(s.seed ^ 0xa11ceULL);
  for (double& p : phase) {
    h = hash64(h);
    p = 2 * kPi * static_cast<double>(h >> 11) * 0x1.0p-53;
  }
  for (int i = 0; i < s.frames; ++i) {
    const double f = s.frames > 1 ? static_cast<double>(i) / s.frames : 0.0;
    Vec3 p, fwd;
    if (s.path == PathKind::kLine) {
      const Vec3 d = s.direction.normalized();
      p = s.center + (f - 0.5) * s.length * d;
      fwd = s.look == LookMode::kTangent ? d : Vec3(d.z(), 0, -d.x());
    } else {
      const double th = s.arc_deg * kPi / 180.0 * f;
      p = s.center + s.radius * Vec3(std::cos(th), 0, std::sin(th));
      fwd = s.look == LookMode::kTangent ? Vec3(-std::sin(th), 0, std::cos(th)) : Vec3(std::cos(th), 0, std::sin(th));
    }
    if (s.look == LookMode::kFixed) fwd = Vec3(0, 0, 1);
    Mat3 R = detail::look_rotation(fwd);
    if (s.path == PathKind::kHandheld) {
      const double t = static_cast<double>(i);
      Vec3 dp, dr;
      for (int a = 0; a < 3; ++a) {
        dp[a] = 0.6 * std::sin(0.21 * t + phase[a]) + 0.4 * std::sin(0.53 * t + phase[3 + a]);
        dr[a] = 0.6 * std::sin(0.17 * t + phase[6 + a]) + 0.4 * std::sin(0.47 * t + phase[9 + a]);
      }
      p += s.jitter_translation * dp;
      R = R * so3_exp(s.jitter_rotation * dr).toRotationMatrix();
    }
    poses.emplace_back(R, p);
  }
  return poses;
}

inline double exposure_at(const SequenceSpec& s, int i) {
  if (s.exposure_max == s.exposure_min) return s.exposure_min;
  const double ph = 0.5 - 0.5 * std::cos(2 * 3.14159265358979323846 * i / s.exposure_period);
  return s.exposure_min + (s.exposure_max - s.exposure_min) * ph;
}

// Per-frame affine corruption, uniform in [-affine_a, affine_a] x [-affine_b, affine_b].
inline std::pair<double, double> affine_at(const SequenceSpec& s, int i) {
  if (s.affine_a == 0 && s.affine_b == 0) return {0.0, 0.0};
  const std::uint64_t h1 = hash64(s.seed ^ (0xaff1ULL + 2 * static_cast<std::uint64_t>(i)));
  const std::uint64_t h2 = hash64(h1);
  const double u1 = static_cast<double>(h1 >> 11) * 0x1.0p-53, u2 = static_cast<double>(h2 >> 11) * 0x1.0p-53;
  return {s.affine_a * (2 * u1 - 1), s.affine_b * (2 * u2 - 1)};
}

inline void validate(const SequenceSpec& s) {
  if (s.width < 32 || s.height < 32) throw SynthError("image size must be at least 32x32");
  if (s.frames < 1) throw SynthError("frames must be positive");
  if (!(s.fps > 0)) throw SynthError("fps must be positive");
  if ((s.room.array() <= 0).any()) throw SynthError("room dimensions must be positive");
  if (!(s.exposure_min > 0 && s.exposure_max >= s.exposure_min)) throw SynthError("need 0 < exposure_min <= exposure_max");
  if (!(s.exposure_period > 0)) throw SynthError("exposure_period must be positive");
  if (s.supersample < 1 || s.supersample > 8) throw SynthError("supersample must be in 1..8");
  if (s.path == PathKind::kLine && s.direction.norm() < 1e-9) throw SynthError("line direction must be nonzero");
  camera_for(s);
  const Scene scene = make_scene(s);
  const auto poses = make_poses(s);
  for (std::size_t i = 0; i < poses.size(); ++i) {
    const Vec3 p = poses[i].translation();
    if (!scene.contains(p, 0.2)) throw SynthError("frame " + std::to_string(i) + " leaves the room");
    for (const auto& sp : scene.spheres)
      if ((p - sp.center).norm() < sp.radius + 0.1)
        throw SynthError("frame " + std::to_string(i) + " intersects a sphere");
  }
}

// ---------------------------------------------------------------------------
// Dataset generation.

struct GenerateSummary {
  int frames = 0;
  double path_length = 0;
  CameraModel camera;
  double seconds = 0;
};

inline std::string frame_name(int i) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%06d", i);
  return buf;
}

inline GenerateSummary generate_sequence(const SequenceSpec& spec, const std::filesystem::path& outdir,
                                         int threads = 0) {
  namespace fs = std::filesystem;
  const auto start = std::chrono::steady_clock::now();
  validate(spec);
  std::error_code ec;
  fs::create_directories(outdir / "images", ec);
  if (ec) throw SynthError("cannot create " + (outdir / "images").string() + ": " + ec.message());

  const CameraModel cam = camera_for(spec);
  const Scene scene = make_scene(spec);
  const auto poses = make_poses(spec);

  std::ofstream times(outdir / "times.txt");
  if (!times) throw SynthError("cannot write " + (outdir / "times.txt").string());
  times << std::setprecision(17);
  const bool affine = spec.affine_a != 0 || spec.affine_b != 0;
  std::ofstream affine_out;
  if (affine) {
    affine_out.open(outdir / "affine_gt.txt");
    if (!affine_out) throw SynthError("cannot write affine_gt.txt");
    affine_out << "# id a b  (intensity = exposure * e^a * radiance + b)\n" << std::setprecision(17);
  }

  Trajectory gt;
  for (int i = 0; i < spec.frames; ++i) {
    RenderOptions ro;
    ro.supersample = spec.supersample;
    ro.exposure = exposure_at(spec, i);
    std::tie(ro.affine_a, ro.affine_b) = affine_at(spec, i);
    ro.threads = threads;
    const auto r = render(scene, poses[static_cast<std::size_t>(i)], cam, ro);
    const double ts = i / spec.fps;
    try {
      write_png(outdir / "images" / (frame_name(i) + ".png"), r.image);
    } catch (const ImageError& e) {
      throw SynthError(e.what());
    }
    times << frame_name(i) << " " << ts << " " << ro.exposure << "\n";
    if (affine) affine_out << frame_name(i) << " " << ro.affine_a << " " << ro.affine_b << "\n";
    gt.push_back(ts, poses[static_cast<std::size_t>(i)]);
  }
  if (!times) throw SynthError("write failed: times.txt");
  try {
    write_calibration(outdir / "camera.txt", cam);
    write_tum(outdir / "groundtruth.txt", gt);
  } catch (const std::exception& e) {
    throw SynthError(e.what());
  }
  GenerateSummary sum;
  sum.frames = spec.frames;
  sum.path_length = gt.length();
  sum.camera = cam;
  sum.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return sum;
}

// ---------------------------------------------------------------------------
// Dataset loading.

enum class CameraMode { kOmni, kPinholeCrop };

struct CropRect {
  int x0 = 0, y0 = 0, width = 0, height = 0;
};

// Square crop of `size` pixels centred on the principal point.
inline CropRect centered_crop(const CameraModel& cam, int size) {
  const int x0 = static_cast<int>(std::lround(cam.intrinsics.cx + 0.5 - 0.5 * size));
  const int y0 = static_cast<int>(std::lround(cam.intrinsics.cy + 0.5 - 0.5 * size));
  return {x0, y0, size, size};
}

// Calibration after cropping `rect` and scaling it to out_w x out_h. Pixel
// centres are at integer coordinates.
inline CameraModel crop_scale_camera(const CameraModel& cam, const CropRect& rect, int out_w, int out_h) {
  const double sx = static_cast<double>(out_w) / rect.width, sy = static_cast<double>(out_h) / rect.height;
  CameraModel c = cam;
  c.intrinsics.fx *= sx;
  c.intrinsics.fy *= sy;
  c.intrinsics.cx = (cam.intrinsics.cx - rect.x0 + 0.5) * sx - 0.5;
  c.intrinsics.cy = (cam.intrinsics.cy - rect.y0 + 0.5) * sy - 0.5;
  c.width = out_w;
  c.height = out_h;
  return c;
}

// Area-averaging resample of a rectangle.
inline Image crop_scale_image(const Image& in, const CropRect& rect, int out_w, int out_h) {
  const double sx = static_cast<double>(rect.width) / out_w, sy = static_cast<double>(rect.height) / out_h;
  const int kx = std::max(1, static_cast<int>(std::ceil(sx))), ky = std::max(1, static_cast<int>(std::ceil(sy)));
  Image out(out_w, out_h, 0.f, in.exposure());
  for (int y = 0; y < out_h; ++y)
    for (int x = 0; x < out_w; ++x) {
      double sum = 0;
      int n = 0;
      for (int j = 0; j < ky; ++j)
        for (int i = 0; i < kx; ++i) {
          const double u = rect.x0 + (x + (i + 0.5) / kx) * sx - 0.5;
          const double v = rect.y0 + (y + (j + 0.5) / ky) * sy - 0.5;
          if (auto val = interp_intensity(in, Vec2(u, v))) {
            sum += *val;
            ++n;
          }
        }
      out(x, y) = n ? static_cast<float>(sum / n) : 0.f;
    }
  return out;
}

struct LoadOptions {
  CameraMode mode = CameraMode::kOmni;
  std::optional<CropRect> crop;
  int resize_width = 0;  // 0: keep crop size
  int resize_height = 0;
  double pinhole_fov_deg = 90;
  int pinhole_size = 0;  // 0: half the source width
  std::ostream* warnings = &std::cerr;
};

class Dataset {
 public:
  static Dataset open(const std::filesystem::path& root, const LoadOptions& opt = {}) {
    namespace fs = std::filesystem;
    Dataset ds;
    ds.root_ = root;
    ds.opt_ = opt;
    if (!fs::is_directory(root)) throw SynthError("dataset directory not found: " + root.string());
    const fs::path calib = root / "camera.txt";
    if (!fs::exists(calib)) throw SynthError("missing calibration " + calib.string());
    try {
      ds.source_camera_ = read_calibration(calib);
    } catch (const CalibrationError& e) {
      throw SynthError(e.what());
    }
    ds.list_frames();
    for (const char* name : {"groundtruth.txt", "groundtruthSync.txt"})
      if (fs::exists(root / name)) {
        try {
          ds.groundtruth_ = read_tum(root / name);
        } catch (const TrajectoryError& e) {
          throw SynthError(e.what());
        }
        break;
      }
    ds.load_photometric();
    ds.build_camera();
    return ds;
  }

  const CameraModel& camera() const { return camera_; }
  const CameraModel& source_camera() const { return source_camera_; }
  std::size_t size() const { return times_.size(); }
  const FrameTime& time(std::size_t i) const { return times_.at(i); }
  const std::optional<Trajectory>& groundtruth() const { return groundtruth_; }
  const std::filesystem::path& root() const { return root_; }

  // Preprocessed image and its validity mask.
  MaskedImage load_image(std::size_t i) const {
    const auto& ft = times_.at(i);
    Image raw;
    try {
      raw = read_image(image_path(ft.id));
    } catch (const ImageError& e) {
      throw SynthError(e.what());
    }
    if (raw.width() != source_camera_.width || raw.height() != source_camera_.height)
      throw SynthError(image_path(ft.id).string() + ": size does not match calibration");
    if (!photometric_.is_identity()) raw = photometric_.apply(raw);
    raw.set_exposure(ft.exposure);
    if (crop_) raw = crop_scale_image(raw, *crop_, crop_width_, crop_height_);
    MaskedImage m;
    if (undistort_) {
      m = undistort_->apply(raw);
    } else {
      m.valid.assign(raw.size(), 1);
      m.image = std::move(raw);
    }
    if (pinhole_) m = pinhole_->map.apply(m.image);
    // Omni images also exclude pixels outside the model domain.
    if (!pinhole_)
      for (int y = 0; y < camera_.height; ++y)
        for (int x = 0; x < camera_.width; ++x)
          if (!camera_.valid_pixel(Vec2(x, y), 0)) m.valid[static_cast<std::size_t>(y) * camera_.width + x] = 0;
    return m;
  }

  Frame load_frame(std::size_t i) const {
    MaskedImage m = load_image(i);
    Frame f;
    f.id = static_cast<int>(i);
    f.timestamp = times_.at(i).timestamp;
    f.pyramid = Pyramid(std::move(m.image));
    if (std::find(m.valid.begin(), m.valid.end(), 0) != m.valid.end()) f.valid = std::move(m.valid);
    return f;
  }

 private:
  std::filesystem::path image_path(const std::string& id) const {
    for (const char* ext : {".png", ".pgm", ".jpg"}) {
      auto p = root_ / "images" / (id + ext);
      if (std::filesystem::exists(p)) return p;
    }
    return root_ / "images" / (id + ".png");
  }

  void list_frames() {
    namespace fs = std::filesystem;
    if (fs::exists(root_ / "times.txt")) {
      try {
        times_ = read_times(root_ / "times.txt");
      } catch (const ImageError& e) {
        throw SynthError(e.what());
      }
      return;
    }
    if (!fs::is_directory(root_ / "images")) throw SynthError("missing images directory in " + root_.string());
    std::vector<std::string> ids;
    for (const auto& e : fs::directory_iterator(root_ / "images"))
      if (e.is_regular_file()) ids.push_back(e.path().stem().string());
    std::sort(ids.begin(), ids.end());
    if (opt_.warnings)
      *opt_.warnings << "warning: " << (root_ / "times.txt").string()
                     << " not found; using exposure 1.0 and 20 Hz timestamps\n";
    for (std::size_t i = 0; i < ids.size(); ++i) times_.push_back({ids[i], 0.05 * static_cast<double>(i), 1.0});
  }

  void load_photometric() {
    namespace fs = std::filesystem;
    if (fs::exists(root_ / "pcalib.txt")) {
      std::ifstream in(root_ / "pcalib.txt");
      for (int i = 0; i < 256; ++i)
        if (!(in >> photometric_.inverse_response[static_cast<std::size_t>(i)]))
          throw SynthError((root_ / "pcalib.txt").string() + ": expected 256 values");
    }
    if (fs::exists(root_ / "vignette.png")) {
      const Image v = read_image(root_ / "vignette.png");
      if (v.width() != source_camera_.width || v.height() != source_camera_.height)
        throw SynthError("vignette.png size does not match calibration");
      const float vmax = *std::max_element(v.data().begin(), v.data().end());
      photometric_.vignette.resize(v.size());
      for (std::size_t k = 0; k < v.size(); ++k) photometric_.vignette[k] = vmax > 0 ? v.data()[k] / vmax : 1.f;
    }
  }

  void build_camera() {
    CameraModel cam = source_camera_;
    if (opt_.crop) {
      const int ow = opt_.resize_width > 0 ? opt_.resize_width : opt_.crop->width;
      const int oh = opt_.resize_height > 0 ? opt_.resize_height : opt_.crop->height;
      if (opt_.crop->width <= 0 || opt_.crop->height <= 0 || ow <= 0 || oh <= 0) throw SynthError("empty crop");
      crop_ = opt_.crop;
      crop_width_ = ow;
      crop_height_ = oh;
      cam = crop_scale_camera(cam, *opt_.crop, ow, oh);
    }
    if (!cam.distortion.is_zero()) undistort_ = make_undistort_map(cam.distortion, cam.intrinsics, cam.width, cam.height);
    cam.distortion = {};
    if (opt_.mode == CameraMode::kPinholeCrop) {
      const int size = opt_.pinhole_size > 0 ? opt_.pinhole_size : cam.width / 2;
      pinhole_ = make_pinhole_crop(cam, size, size, opt_.pinhole_fov_deg);
      camera_ = pinhole_->camera;
    } else {
      camera_ = cam;
    }
  }

  std::filesystem::path root_;
  LoadOptions opt_;
  CameraModel source_camera_;
  CameraModel camera_;
  std::vector<FrameTime> times_;
  std::optional<Trajectory> groundtruth_;
  PhotometricCalibration photometric_;
  std::optional<CropRect> crop_;
  int crop_width_ = 0, crop_height_ = 0;
  std::optional<RemapTable> undistort_;
  std::optional<PinholeCrop> pinhole_;
};

// Sequential frame reader that decodes up to two frames ahead.
class FrameStream {
 public:
  explicit FrameStream(const Dataset& ds, std::size_t read_ahead = 2) : ds_(ds), ahead_(read_ahead) { fill(); }

  std::optional<Frame> next() {
    if (pending_.empty()) return std::nullopt;
    Frame f = pending_.front().get();
    pending_.pop_front();
    fill();
    return f;
  }

 private:
  void fill() {
    while (pending_.size() < std::max<std::size_t>(1, ahead_) && next_index_ < ds_.size()) {
      const std::size_t i = next_index_++;
      pending_.push_back(std::async(std::launch::async, [this, i] { return ds_.load_frame(i); }));
    }
  }

  const Dataset& ds_;
  std::size_t ahead_;
  std::size_t next_index_ = 0;
  std::deque<std::future<Frame>> pending_;
};

}  // namespace omnivo::synth
