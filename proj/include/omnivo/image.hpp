#pragma once

#include <png.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace omnivo {

class ImageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Grayscale image with real-valued intensities (nominally [0,255]) and the
// exposure time it was captured with.
class Image {
 public:
  Image() = default;
  Image(int width, int height, float fill = 0.f, double exposure = 1.0)
      : width_(width), height_(height),
        data_(static_cast<std::size_t>(width) * height, fill),
        exposure_(exposure) {
    if (width < 0 || height < 0) throw ImageError("negative image size");
    if (!(exposure > 0)) throw ImageError("exposure must be positive");
  }

  int width() const { return width_; }
  int height() const { return height_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double exposure() const { return exposure_; }
  void set_exposure(double t) {
    if (!(t > 0)) throw ImageError("exposure must be positive");
    exposure_ = t;
  }

  float& operator()(int x, int y) { return data_[index(x, y)]; }
  float operator()(int x, int y) const { return data_[index(x, y)]; }

  std::vector<float>& data() { return data_; }
  const std::vector<float>& data() const { return data_; }

  bool contains(int x, int y) const {
    return x >= 0 && y >= 0 && x < width_ && y < height_;
  }

  double mean() const {
    if (data_.empty()) return 0.0;
    double s = 0;
    for (float v : data_) s += v;
    return s / static_cast<double>(data_.size());
  }

 private:
  std::size_t index(int x, int y) const {
    return static_cast<std::size_t>(y) * width_ + x;
  }

  int width_ = 0;
  int height_ = 0;
  std::vector<float> data_;
  double exposure_ = 1.0;
};

// Bilinear intensity at sub-pixel position. Valid for u in [0,w-2]x[0,h-2].
inline std::optional<double> interp_intensity(const Image& img, const Eigen::Vector2d& u) {
  if (!(u.x() >= 0.0 && u.y() >= 0.0 && u.x() <= img.width() - 2 &&
        u.y() <= img.height() - 2))
    return std::nullopt;
  const int x = static_cast<int>(u.x());
  const int y = static_cast<int>(u.y());
  const double dx = u.x() - x;
  const double dy = u.y() - y;
  const double i00 = img(x, y), i10 = img(x + 1, y);
  const double i01 = img(x, y + 1), i11 = img(x + 1, y + 1);
  return (1 - dy) * ((1 - dx) * i00 + dx * i10) + dy * ((1 - dx) * i01 + dx * i11);
}

struct IntensitySample {
  double value = 0;
  double gx = 0;
  double gy = 0;
};

// One pyramid level: intensity plus central-difference gradients, stored
// interleaved so that a bilinear lookup touches one cache line per row.
class ImageLevel {
 public:
  ImageLevel() = default;

  explicit ImageLevel(const Image& img) : width_(img.width()), height_(img.height()) {
    data_.resize(static_cast<std::size_t>(width_) * height_);
    for (int y = 0; y < height_; ++y) {
      for (int x = 0; x < width_; ++x) {
        // One-sided differences on the border.
        const int xl = std::max(x - 1, 0), xr = std::min(x + 1, width_ - 1);
        const int yu = std::max(y - 1, 0), yd = std::min(y + 1, height_ - 1);
        const float gx = xr > xl ? (img(xr, y) - img(xl, y)) / float(xr - xl) : 0.f;
        const float gy = yd > yu ? (img(x, yd) - img(x, yu)) / float(yd - yu) : 0.f;
        data_[idx(x, y)] = Eigen::Vector3f(img(x, y), gx, gy);
      }
    }
  }

  int width() const { return width_; }
  int height() const { return height_; }

  const Eigen::Vector3f& at(int x, int y) const { return data_[idx(x, y)]; }
  float intensity(int x, int y) const { return data_[idx(x, y)][0]; }
  float grad_sq(int x, int y) const {
    const auto& d = data_[idx(x, y)];
    return d[1] * d[1] + d[2] * d[2];
  }

  bool inside(const Eigen::Vector2d& u, double margin = 0.0) const {
    return u.x() >= margin && u.y() >= margin && u.x() <= width_ - 2 - margin &&
           u.y() <= height_ - 2 - margin;
  }

 private:
  std::size_t idx(int x, int y) const { return static_cast<std::size_t>(y) * width_ + x; }

  int width_ = 0;
  int height_ = 0;
  std::vector<Eigen::Vector3f> data_;
};

// Bilinear intensity and gradient; gradients are bilinear interpolations of
// the central-difference gradient images. nullopt when out of bounds.
inline std::optional<IntensitySample> interp(const ImageLevel& img, const Eigen::Vector2d& u) {
  if (!img.inside(u)) return std::nullopt;
  const int x = static_cast<int>(u.x());
  const int y = static_cast<int>(u.y());
  const float dx = static_cast<float>(u.x() - x);
  const float dy = static_cast<float>(u.y() - y);
  const Eigen::Vector3f v = (1 - dy) * ((1 - dx) * img.at(x, y) + dx * img.at(x + 1, y)) +
                            dy * ((1 - dx) * img.at(x, y + 1) + dx * img.at(x + 1, y + 1));
  return IntensitySample{v[0], v[1], v[2]};
}

inline constexpr int kPyramidLevels = 5;
inline constexpr int kMinPyramidInput = 32;

// Each coarser pixel is the mean of its 2x2 children.
inline Image downsample(const Image& img) {
  Image out(img.width() / 2, img.height() / 2, 0.f, img.exposure());
  for (int y = 0; y < out.height(); ++y)
    for (int x = 0; x < out.width(); ++x)
      out(x, y) = 0.25f * (img(2 * x, 2 * y) + img(2 * x + 1, 2 * y) +
                           img(2 * x, 2 * y + 1) + img(2 * x + 1, 2 * y + 1));
  return out;
}

class Pyramid {
 public:
  Pyramid() = default;

  explicit Pyramid(Image base) {
    if (base.width() < kMinPyramidInput || base.height() < kMinPyramidInput)
      throw ImageError("image too small for a " + std::to_string(kPyramidLevels) +
                       "-level pyramid: " + std::to_string(base.width()) + "x" +
                       std::to_string(base.height()));
    images_.reserve(kPyramidLevels);
    images_.push_back(std::move(base));
    for (int l = 1; l < kPyramidLevels; ++l) images_.push_back(downsample(images_.back()));
    levels_.reserve(kPyramidLevels);
    for (const auto& im : images_) levels_.emplace_back(im);
  }

  int num_levels() const { return static_cast<int>(levels_.size()); }
  const Image& image(int level) const { return images_.at(level); }
  const ImageLevel& level(int level) const { return levels_.at(level); }
  double exposure() const { return images_.empty() ? 1.0 : images_.front().exposure(); }
  int width() const { return images_.front().width(); }
  int height() const { return images_.front().height(); }

 private:
  std::vector<Image> images_;
  std::vector<ImageLevel> levels_;
};

// Optional photometric preprocessing: I' = G^-1(I) / V(x). Identity by
// default; the inverse response maps 8-bit values to irradiance.
struct PhotometricCalibration {
  std::array<float, 256> inverse_response{};
  std::vector<float> vignette;  // empty = no vignetting, else width*height

  PhotometricCalibration() {
    for (int i = 0; i < 256; ++i) inverse_response[i] = static_cast<float>(i);
  }

  bool is_identity() const {
    if (!vignette.empty()) return false;
    for (int i = 0; i < 256; ++i)
      if (inverse_response[i] != static_cast<float>(i)) return false;
    return true;
  }

  Image apply(const Image& raw) const {
    if (is_identity()) return raw;
    Image out(raw.width(), raw.height(), 0.f, raw.exposure());
    const bool vig = vignette.size() == raw.size();
    for (int y = 0; y < raw.height(); ++y)
      for (int x = 0; x < raw.width(); ++x) {
        const float v = raw(x, y);
        const int lo = std::clamp(static_cast<int>(v), 0, 254);
        const float f = std::clamp(v - lo, 0.f, 1.f);
        float g = (1 - f) * inverse_response[lo] + f * inverse_response[lo + 1];
        if (vig) g /= std::max(vignette[static_cast<std::size_t>(y) * raw.width() + x], 1e-3f);
        out(x, y) = g;
      }
    return out;
  }
};

// ---------------------------------------------------------------------------
// Readers / writers

namespace detail {

inline std::string read_pgm_token(std::istream& in) {
  std::string tok;
  char c;
  while (in.get(c)) {
    if (c == '#') {
      std::string skip;
      std::getline(in, skip);
      continue;
    }
    if (std::isspace(static_cast<unsigned char>(c))) {
      if (!tok.empty()) break;
      continue;
    }
    tok.push_back(c);
  }
  return tok;
}

}  // namespace detail

inline Image read_pgm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ImageError("cannot open " + path.string());
  if (detail::read_pgm_token(in) != "P5") throw ImageError(path.string() + ": not a binary PGM (P5)");
  int w = 0, h = 0, maxval = 0;
  try {
    w = std::stoi(detail::read_pgm_token(in));
    h = std::stoi(detail::read_pgm_token(in));
    maxval = std::stoi(detail::read_pgm_token(in));
  } catch (const std::exception&) {
    throw ImageError(path.string() + ": malformed PGM header");
  }
  if (w <= 0 || h <= 0 || maxval != 255) throw ImageError(path.string() + ": unsupported PGM header");
  std::vector<unsigned char> buf(static_cast<std::size_t>(w) * h);
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (in.gcount() != static_cast<std::streamsize>(buf.size())) throw ImageError(path.string() + ": truncated PGM");
  Image img(w, h);
  std::transform(buf.begin(), buf.end(), img.data().begin(), [](unsigned char c) { return float(c); });
  return img;
}

inline std::vector<std::uint8_t> to_bytes(const Image& img) {
  std::vector<std::uint8_t> out(img.size());
  std::transform(img.data().begin(), img.data().end(), out.begin(), [](float v) {
    return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
  });
  return out;
}

inline void write_pgm(const std::filesystem::path& path, const Image& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ImageError("cannot write " + path.string());
  out << "P5\n" << img.width() << " " << img.height() << "\n255\n";
  const auto bytes = to_bytes(img);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw ImageError("write failed: " + path.string());
}

// 8-bit grayscale PNG (colour inputs are converted by libpng).
inline Image read_png(const std::filesystem::path& path) {
  png_image pimg{};
  pimg.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&pimg, path.c_str()))
    throw ImageError(path.string() + ": " + pimg.message);
  pimg.format = PNG_FORMAT_GRAY;
  std::vector<std::uint8_t> buf(PNG_IMAGE_SIZE(pimg));
  if (!png_image_finish_read(&pimg, nullptr, buf.data(), 0, nullptr)) {
    png_image_free(&pimg);
    throw ImageError(path.string() + ": " + pimg.message);
  }
  Image img(static_cast<int>(pimg.width), static_cast<int>(pimg.height));
  std::transform(buf.begin(), buf.end(), img.data().begin(), [](std::uint8_t c) { return float(c); });
  return img;
}

inline void write_png(const std::filesystem::path& path, const Image& img) {
  png_image pimg{};
  pimg.version = PNG_IMAGE_VERSION;
  pimg.width = static_cast<png_uint_32>(img.width());
  pimg.height = static_cast<png_uint_32>(img.height());
  pimg.format = PNG_FORMAT_GRAY;
  const auto bytes = to_bytes(img);
  if (!png_image_write_to_file(&pimg, path.c_str(), 0, bytes.data(), 0, nullptr))
    throw ImageError("cannot write " + path.string() + ": " + pimg.message);
}

inline Image read_image(const std::filesystem::path& path) {
  auto ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  if (ext == ".pgm") return read_pgm(path);
  if (ext == ".png") return read_png(path);
  throw ImageError("unsupported image format: " + path.string());
}

// `id timestamp [exposure]` per line; exposure defaults to 1.
struct FrameTime {
  std::string id;
  double timestamp = 0;
  double exposure = 1.0;
};

inline std::vector<FrameTime> read_times(std::istream& in, const std::string& name = "times.txt") {
  std::vector<FrameTime> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ss(line);
    FrameTime ft;
    if (!(ss >> ft.id >> ft.timestamp))
      throw ImageError(name + ":" + std::to_string(lineno) + ": expected `id timestamp [exposure]`");
    double e;
    if (ss >> e) {
      if (!(e > 0)) throw ImageError(name + ":" + std::to_string(lineno) + ": exposure must be positive");
      ft.exposure = e;
    }
    if (!out.empty() && !(ft.timestamp > out.back().timestamp))
      throw ImageError(name + ":" + std::to_string(lineno) + ": timestamps not strictly increasing");
    out.push_back(ft);
  }
  return out;
}

inline std::vector<FrameTime> read_times(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ImageError("cannot open " + path.string());
  return read_times(in, path.string());
}

}  // namespace omnivo

namespace omnivo {

// A captured frame ready for tracking: pyramid plus timing metadata.
struct Frame {
  int id = 0;
  double timestamp = 0;
  Pyramid pyramid;
  std::vector<std::uint8_t> valid;  // optional level-0 validity mask (empty = all valid)

  double exposure() const { return pyramid.exposure(); }
  bool is_valid(int x, int y) const {
    return valid.empty() || valid[static_cast<std::size_t>(y) * pyramid.width() + x] != 0;
  }
};

}  // namespace omnivo
