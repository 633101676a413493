#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "stnet/geometry.hpp"
#include "stnet/nn.hpp"

namespace stnet {

class ImageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// 8-bit raster, 1 (gray) or 3 (RGB) interleaved channels, row-major.
struct Image {
  int width = 0;
  int height = 0;
  int channels = 1;
  std::vector<std::uint8_t> pixels;

  static Image filled(int w, int h, int ch, std::uint8_t value) {
    if (w <= 0 || h <= 0 || (ch != 1 && ch != 3)) throw ImageError("invalid image shape");
    return Image{w, h, ch, std::vector<std::uint8_t>(static_cast<std::size_t>(w) * h * ch, value)};
  }

  std::uint8_t& at(int x, int y, int c = 0) {
    return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  std::uint8_t at(int x, int y, int c = 0) const {
    return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  bool contains(int x, int y) const { return x >= 0 && y >= 0 && x < width && y < height; }

  Image to_rgb() const {
    if (channels == 3) return *this;
    Image out = filled(width, height, 3, 0);
    for (std::size_t i = 0; i < pixels.size(); ++i)
      for (int c = 0; c < 3; ++c) out.pixels[i * 3 + c] = pixels[i];
    return out;
  }

  friend bool operator==(const Image&, const Image&) = default;
};

/// Binary PGM (gray) or PPM (RGB).
inline void write_pnm(const Image& img, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ImageError("cannot write image: " + path);
  os << (img.channels == 1 ? "P5" : "P6") << '\n' << img.width << ' ' << img.height << "\n255\n";
  os.write(reinterpret_cast<const char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (!os) throw ImageError("failed writing image: " + path);
}

inline Image read_pnm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ImageError("cannot read image: " + path);
  std::string magic;
  is >> magic;
  if (magic != "P5" && magic != "P6") throw ImageError("unsupported image format (need binary PGM/PPM): " + path);
  auto next_int = [&]() {
    int v = 0;
    while (is >> std::ws && is.peek() == '#') {
      std::string skip;
      std::getline(is, skip);
    }
    if (!(is >> v)) throw ImageError("truncated image header: " + path);
    return v;
  };
  const int w = next_int();
  const int h = next_int();
  const int maxval = next_int();
  if (maxval != 255) throw ImageError("only 8-bit images are supported: " + path);
  is.get();
  Image img = Image::filled(w, h, magic == "P5" ? 1 : 3, 0);
  is.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (is.gcount() != static_cast<std::streamsize>(img.pixels.size())) throw ImageError("truncated image data: " + path);
  return img;
}

// ---------------------------------------------------------------- homography

using Homography = Eigen::Matrix3d;

inline Point apply(const Homography& h, Point p) {
  const Eigen::Vector3d v = h * Eigen::Vector3d(p.x, p.y, 1.0);
  return Point{v.x() / v.z(), v.y() / v.z()};
}

/// Projective map taking src[i] to dst[i] (direct linear solve, h33 = 1).
inline Homography homography_from_points(const std::array<Point, 4>& src, const std::array<Point, 4>& dst) {
  Eigen::Matrix<double, 8, 8> a;
  Eigen::Matrix<double, 8, 1> b;
  for (int i = 0; i < 4; ++i) {
    const auto& s = src[static_cast<std::size_t>(i)];
    const auto& d = dst[static_cast<std::size_t>(i)];
    a.row(2 * i) << s.x, s.y, 1, 0, 0, 0, -d.x * s.x, -d.x * s.y;
    a.row(2 * i + 1) << 0, 0, 0, s.x, s.y, 1, -d.y * s.x, -d.y * s.y;
    b(2 * i) = d.x;
    b(2 * i + 1) = d.y;
  }
  const Eigen::Matrix<double, 8, 1> x = a.fullPivLu().solve(b);
  Homography h;
  h << x(0), x(1), x(2), x(3), x(4), x(5), x(6), x(7), 1.0;
  return h;
}

/// Resamples `src` under the forward map `h` (nearest neighbour through the inverse).
inline Image warp_image(const Image& src, const Homography& h, std::uint8_t background) {
  const Homography inv = h.inverse();
  Image out = Image::filled(src.width, src.height, src.channels, background);
  for (int y = 0; y < out.height; ++y)
    for (int x = 0; x < out.width; ++x) {
      const Point p = apply(inv, Point{x + 0.5, y + 0.5});
      const int sx = static_cast<int>(std::floor(p.x));
      const int sy = static_cast<int>(std::floor(p.y));
      if (!src.contains(sx, sy)) continue;
      for (int c = 0; c < src.channels; ++c) out.at(x, y, c) = src.at(sx, sy, c);
    }
  return out;
}

// ---------------------------------------------------------------- canvas placement

/// Affine placement of a document inside the model canvas: p' = p * scale + offset.
struct Placement {
  double scale = 1.0;
  double offset_x = 0.0;
  double offset_y = 0.0;
  int canvas_width = 0;
  int canvas_height = 0;

  Point to_canvas(Point p) const { return Point{p.x * scale + offset_x, p.y * scale + offset_y}; }
  Point to_document(Point p) const { return Point{(p.x - offset_x) / scale, (p.y - offset_y) / scale}; }

  PixelPolygon to_canvas(const PixelPolygon& poly) const {
    std::array<Point, 4> pts{};
    for (std::size_t i = 0; i < 4; ++i) pts[i] = to_canvas(poly[i]);
    return canonicalize(pts);
  }
};

enum class PaddingMode { centered, random };

/// Scales a document down (never up) to fit the canvas, keeping its aspect
/// ratio; the leftover margin is split evenly or at a uniformly drawn offset.
inline Placement plan_placement(int doc_w, int doc_h, int canvas_w, int canvas_h, PaddingMode mode,
                                std::mt19937_64* rng) {
  const double scale = std::min({1.0, static_cast<double>(canvas_w) / doc_w, static_cast<double>(canvas_h) / doc_h});
  const int w = static_cast<int>(std::floor(doc_w * scale));
  const int h = static_cast<int>(std::floor(doc_h * scale));
  Placement p;
  p.scale = scale;
  p.canvas_width = canvas_w;
  p.canvas_height = canvas_h;
  const int slack_x = canvas_w - w;
  const int slack_y = canvas_h - h;
  if (mode == PaddingMode::random && rng) {
    p.offset_x = std::uniform_int_distribution<int>(0, slack_x)(*rng);
    p.offset_y = std::uniform_int_distribution<int>(0, slack_y)(*rng);
  } else {
    p.offset_x = slack_x / 2;
    p.offset_y = slack_y / 2;
  }
  return p;
}

/// Gray canvas in [0, 1] (white padding) as the model input matrix.
template <class S>
Mat<S> place_on_canvas(const Image& doc, const Placement& p) {
  Mat<S> out = Mat<S>::Ones(p.canvas_height, p.canvas_width);
  for (int y = 0; y < p.canvas_height; ++y)
    for (int x = 0; x < p.canvas_width; ++x) {
      const int sx = static_cast<int>(std::floor((x + 0.5 - p.offset_x) / p.scale));
      const int sy = static_cast<int>(std::floor((y + 0.5 - p.offset_y) / p.scale));
      if (x < p.offset_x || y < p.offset_y || !doc.contains(sx, sy)) continue;
      double v = 0.0;
      for (int c = 0; c < doc.channels; ++c) v += doc.at(sx, sy, c);
      out(y, x) = static_cast<S>(v / (255.0 * doc.channels));
    }
  return out;
}

// ---------------------------------------------------------------- drawing

struct Rgb {
  std::uint8_t r, g, b;
};

inline void put_pixel(Image& img, int x, int y, Rgb c) {
  if (!img.contains(x, y)) return;
  if (img.channels == 3) {
    img.at(x, y, 0) = c.r;
    img.at(x, y, 1) = c.g;
    img.at(x, y, 2) = c.b;
  } else {
    img.at(x, y) = static_cast<std::uint8_t>((c.r + c.g + c.b) / 3);
  }
}

/// Bresenham between rounded endpoints.
inline void draw_line(Image& img, Point a, Point b, Rgb c) {
  int x0 = static_cast<int>(std::lround(a.x)), y0 = static_cast<int>(std::lround(a.y));
  const int x1 = static_cast<int>(std::lround(b.x)), y1 = static_cast<int>(std::lround(b.y));
  const int dx = std::abs(x1 - x0), sx = x0 < x1 ? 1 : -1;
  const int dy = -std::abs(y1 - y0), sy = y0 < y1 ? 1 : -1;
  int err = dx + dy;
  while (true) {
    put_pixel(img, x0, y0, c);
    if (x0 == x1 && y0 == y1) break;
    const int e2 = 2 * err;
    if (e2 >= dy) {
      err += dy;
      x0 += sx;
    }
    if (e2 <= dx) {
      err += dx;
      y0 += sy;
    }
  }
}

inline void draw_polygon(Image& img, const std::array<Point, 4>& pts, Rgb c) {
  for (std::size_t i = 0; i < 4; ++i) draw_line(img, pts[i], pts[(i + 1) % 4], c);
}

}  // namespace stnet
