#pragma once

#include <sdlab/core/image.hpp>
#include <sdlab/scenes/scene.hpp>

#include <algorithm>
#include <cmath>

namespace sdlab::scenes {

/// Signed distances in canvas units ([-1, 1] square); negative inside.
namespace sdf {

inline double circle(double dx, double dy, double r) { return std::hypot(dx, dy) - r; }

/// Axis-aligned square with half-extent r (Chebyshev ball).
inline double square(double dx, double dy, double r) {
  double qx = std::abs(dx) - r;
  double qy = std::abs(dy) - r;
  double outside = std::hypot(std::max(qx, 0.0), std::max(qy, 0.0));
  double inside = std::min(std::max(qx, qy), 0.0);
  return outside + inside;
}

/// Axis-aligned rectangle with half-extents (rx, ry).
inline double rect(double dx, double dy, double rx, double ry) {
  double qx = std::abs(dx) - rx;
  double qy = std::abs(dy) - ry;
  double outside = std::hypot(std::max(qx, 0.0), std::max(qy, 0.0));
  double inside = std::min(std::max(qx, qy), 0.0);
  return outside + inside;
}

/// Equilateral triangle, apex up, circumradius r. Exact inside and in the
/// edge-normal regions, which is all anti-aliasing needs.
inline double triangle(double dx, double dy, double r) {
  // Vertices at angles 90, 210, 330 degrees. Edge lines have inward normals;
  // the signed distance of a convex polygon is the max over edge half-planes.
  const double k = std::sqrt(3.0) / 2.0;
  double d_bottom = -dy - 0.5 * r;                 // edge y = -r/2
  double d_left = 0.5 * dy - k * dx - 0.5 * r;     // edge from apex to bottom-left
  double d_right = 0.5 * dy + k * dx - 0.5 * r;    // edge from apex to bottom-right
  return std::max({d_bottom, d_left, d_right});
}

/// Plus sign: union of two rectangles, arm half-width 0.34 r.
inline double cross(double dx, double dy, double r) {
  double w = 0.34 * r;
  return std::min(rect(dx, dy, r, w), rect(dx, dy, w, r));
}

inline double shape(Shape s, double dx, double dy, double r) {
  switch (s) {
    case Shape::circle: return circle(dx, dy, r);
    case Shape::square: return square(dx, dy, r);
    case Shape::triangle: return triangle(dx, dy, r);
    case Shape::cross: return cross(dx, dy, r);
  }
  return 0.0;
}

}  // namespace sdf

/// Linear-ramp coverage over a one-pixel band around the zero level set.
inline double coverage(double dist, double aa) {
  return std::clamp(0.5 - dist / aa, 0.0, 1.0);
}

constexpr double kDotRadius = 0.13;       // canvas units, absolute
constexpr double kRingRadiusFrac = 0.62;  // fraction of the shape radius
constexpr double kRingHalfWidth = 0.08;
constexpr std::array<double, 3> kAccessoryColor = {0.97, 0.97, 0.97};

/// Renders the scene at the given square resolution. Pure function of its
/// arguments: repeated calls are bit-identical.
inline ImageT<double> rasterize(const SceneSpec& spec, int res) {
  spec.validate();
  ImageT<double> img = ImageT<double>::zeros(res, res, 3);
  const auto& bg = kBackgrounds[std::size_t(spec.background_id)];
  const auto& fg = kPalette[std::size_t(spec.color_id)];
  const double r = 0.5 * spec.scale;
  const double aa = 2.0 / res;  // one-pixel band in canvas units

  for (int y = 0; y < res; ++y) {
    // Image row 0 is the top of the canvas (y = +1 side).
    double cy = -pixel_center(y, res);
    for (int x = 0; x < res; ++x) {
      double cx = pixel_center(x, res);
      double dx = cx - spec.pos_x;
      double dy = cy - spec.pos_y;

      double cov_shape = coverage(sdf::shape(spec.shape, dx, dy, r), aa);
      double cov_acc = 0.0;
      if (spec.accessory == Accessory::dot) {
        cov_acc = coverage(sdf::circle(dx, dy, kDotRadius), aa);
      } else if (spec.accessory == Accessory::ring) {
        double d = std::abs(sdf::circle(dx, dy, kRingRadiusFrac * r)) - kRingHalfWidth;
        cov_acc = coverage(d, aa);
      }

      for (int ch = 0; ch < 3; ++ch) {
        double v = bg[std::size_t(ch)];
        v = v + cov_shape * (fg[std::size_t(ch)] - v);
        v = v + cov_acc * (kAccessoryColor[std::size_t(ch)] - v);
        img.at(y, x, ch) = v;
      }
    }
  }
  return img;
}

}  // namespace sdlab::scenes
