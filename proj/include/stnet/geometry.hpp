#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "stnet/vocab.hpp"

namespace stnet {

class GeometryError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Point {
  double x = 0.0;
  double y = 0.0;
  friend bool operator==(const Point&, const Point&) = default;
};

namespace detail {

inline double cross(Point o, Point a, Point b) { return (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x); }

// Signed shoelace area; positive for clockwise order in image coordinates (y down).
inline double signed_area(const std::vector<Point>& pts) {
  double s = 0.0;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    const Point& a = pts[i];
    const Point& b = pts[(i + 1) % pts.size()];
    s += a.x * b.y - b.x * a.y;
  }
  return 0.5 * s;
}

inline constexpr double area_epsilon = 1e-9;

}  // namespace detail

/// Four points in canonical order: top-left, top-right, bottom-right,
/// bottom-left (clockwise with y pointing down). Only constructible through
/// canonicalize(), so area > 0 always holds.
class PixelPolygon {
 public:
  const std::array<Point, 4>& points() const { return pts_; }
  const Point& operator[](std::size_t i) const { return pts_[i]; }
  friend bool operator==(const PixelPolygon&, const PixelPolygon&) = default;

  Point centroid() const {
    Point c;
    for (const auto& p : pts_) {
      c.x += p.x / 4.0;
      c.y += p.y / 4.0;
    }
    return c;
  }

  double min_x() const { return std::min({pts_[0].x, pts_[1].x, pts_[2].x, pts_[3].x}); }
  double max_x() const { return std::max({pts_[0].x, pts_[1].x, pts_[2].x, pts_[3].x}); }
  double min_y() const { return std::min({pts_[0].y, pts_[1].y, pts_[2].y, pts_[3].y}); }
  double max_y() const { return std::max({pts_[0].y, pts_[1].y, pts_[2].y, pts_[3].y}); }

 private:
  friend PixelPolygon canonicalize(std::array<Point, 4> pts);
  std::array<Point, 4> pts_{};
};

/// Sorts by angle about the centroid (clockwise on screen), then rotates so
/// the point with the smallest x + y comes first.
inline PixelPolygon canonicalize(std::array<Point, 4> pts) {
  for (const auto& p : pts)
    if (!std::isfinite(p.x) || !std::isfinite(p.y)) throw GeometryError("non-finite polygon point");
  Point c;
  for (const auto& p : pts) {
    c.x += p.x / 4.0;
    c.y += p.y / 4.0;
  }
  std::array<double, 4> ang{};
  std::array<std::size_t, 4> idx{0, 1, 2, 3};
  for (std::size_t i = 0; i < 4; ++i) ang[i] = std::atan2(pts[i].y - c.y, pts[i].x - c.x);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    if (ang[a] != ang[b]) return ang[a] < ang[b];
    return a < b;
  });
  std::array<Point, 4> sorted{};
  for (std::size_t i = 0; i < 4; ++i) sorted[i] = pts[idx[i]];
  std::size_t first = 0;
  for (std::size_t i = 1; i < 4; ++i) {
    const double si = sorted[i].x + sorted[i].y;
    const double sf = sorted[first].x + sorted[first].y;
    if (si < sf || (si == sf && sorted[i].y < sorted[first].y)) first = i;
  }
  PixelPolygon out;
  for (std::size_t i = 0; i < 4; ++i) out.pts_[i] = sorted[(first + i) % 4];
  std::vector<Point> v(out.pts_.begin(), out.pts_.end());
  if (std::abs(detail::signed_area(v)) <= detail::area_epsilon) throw GeometryError("degenerate polygon (zero area)");
  return out;
}

inline PixelPolygon make_rect(double x0, double y0, double x1, double y1) {
  return canonicalize({Point{x0, y0}, Point{x1, y0}, Point{x1, y1}, Point{x0, y1}});
}

inline double polygon_area(const PixelPolygon& poly) {
  std::vector<Point> v(poly.points().begin(), poly.points().end());
  return std::abs(detail::signed_area(v));
}

inline bool is_convex(const PixelPolygon& poly) {
  const auto& p = poly.points();
  int sign = 0;
  for (std::size_t i = 0; i < 4; ++i) {
    const double cr = detail::cross(p[i], p[(i + 1) % 4], p[(i + 2) % 4]);
    if (std::abs(cr) <= detail::area_epsilon) continue;
    const int s = cr > 0 ? 1 : -1;
    if (sign == 0) sign = s;
    else if (s != sign) return false;
  }
  return true;
}

namespace detail {

// Sutherland-Hodgman: clips `subject` against the convex, positively oriented `clip`.
inline std::vector<Point> clip_convex(std::vector<Point> subject, const std::vector<Point>& clip) {
  for (std::size_t e = 0; e < clip.size() && !subject.empty(); ++e) {
    const Point a = clip[e];
    const Point b = clip[(e + 1) % clip.size()];
    std::vector<Point> input = std::move(subject);
    subject.clear();
    for (std::size_t i = 0; i < input.size(); ++i) {
      const Point cur = input[i];
      const Point prev = input[(i + input.size() - 1) % input.size()];
      const double dc = cross(a, b, cur);
      const double dp = cross(a, b, prev);
      const bool cur_in = dc >= 0.0;
      const bool prev_in = dp >= 0.0;
      if (cur_in != prev_in) {
        const double t = dp / (dp - dc);
        subject.push_back(Point{prev.x + t * (cur.x - prev.x), prev.y + t * (cur.y - prev.y)});
      }
      if (cur_in) subject.push_back(cur);
    }
  }
  return subject;
}

inline std::vector<Point> oriented(const PixelPolygon& poly) {
  std::vector<Point> v(poly.points().begin(), poly.points().end());
  if (signed_area(v) < 0) std::reverse(v.begin(), v.end());
  return v;
}

}  // namespace detail

inline double intersection_area(const PixelPolygon& a, const PixelPolygon& b) {
  if (!is_convex(a) || !is_convex(b)) throw GeometryError("polygon_iou requires convex polygons");
  const auto clipped = detail::clip_convex(detail::oriented(a), detail::oriented(b));
  if (clipped.size() < 3) return 0.0;
  return std::abs(detail::signed_area(clipped));
}

inline double polygon_iou(const PixelPolygon& a, const PixelPolygon& b) {
  const double inter = intersection_area(a, b);
  const double uni = polygon_area(a) + polygon_area(b) - inter;
  if (uni <= 0.0) return 0.0;
  return std::clamp(inter / uni, 0.0, 1.0);
}

/// Per-axis quantization: x against width, y against height.
inline QuantPolygon quantize_polygon(const PixelPolygon& poly, int width, int height) {
  QuantPolygon q;
  for (std::size_t i = 0; i < 4; ++i) {
    q.bins[2 * i] = quantize_coord(std::max(0.0, poly[i].x), width);
    q.bins[2 * i + 1] = quantize_coord(std::max(0.0, poly[i].y), height);
  }
  return q;
}

inline std::array<Point, 4> dequantize_points(const QuantPolygon& q, int width, int height) {
  std::array<Point, 4> pts{};
  for (std::size_t i = 0; i < 4; ++i)
    pts[i] = Point{dequantize_coord(q.bins[2 * i], width), dequantize_coord(q.bins[2 * i + 1], height)};
  return pts;
}

/// IoU used when scoring predictions: degenerate or non-convex predictions score 0.
inline double prediction_iou(const std::array<Point, 4>& predicted, const PixelPolygon& gold) {
  try {
    const PixelPolygon p = canonicalize(predicted);
    if (!is_convex(p)) return 0.0;
    return polygon_iou(p, gold);
  } catch (const GeometryError&) {
    return 0.0;
  }
}

}  // namespace stnet
