#pragma once

#include <sdlab/core/image.hpp>
#include <sdlab/core/rng.hpp>

#include <algorithm>
#include <cmath>

namespace sdlab::scenes {

/// Differentiable view transform applied to generator output: horizontal
/// flip, then zoom about the canvas origin, then a center shift.
struct ViewPose {
  double center_x = 0.0;
  double center_y = 0.0;
  double zoom = 1.0;
  bool flip = false;

  static ViewPose identity() { return {}; }
  bool is_identity() const {
    return center_x == 0.0 && center_y == 0.0 && zoom == 1.0 && !flip;
  }
};

constexpr double kPoseZoomMin = 0.8;
constexpr double kPoseZoomMax = 1.25;
constexpr double kPoseCenterMax = 0.3;

/// Max center shift that keeps the scene's object bounding box (|p| <= 0.65
/// in canvas units, plus margin) inside the sampled window of width 2/zoom.
inline double pose_center_limit(double zoom) {
  return std::min(kPoseCenterMax, 1.0 / zoom - 0.7);
}

inline ViewPose sample_pose(Rng& rng) {
  ViewPose pose;
  pose.zoom = rng.uniform(kPoseZoomMin, kPoseZoomMax);
  double lim = pose_center_limit(pose.zoom);
  pose.center_x = rng.uniform(-lim, lim);
  pose.center_y = rng.uniform(-lim, lim);
  pose.flip = rng.bernoulli(0.5);
  return pose;
}

/// Bilinear tap weights for one output pixel. Source indices are clamped to
/// the border.
struct BilinearTap {
  int x0, x1, y0, y1;
  double fx, fy;
};

inline BilinearTap bilinear_tap(double sx, double sy, int src_h, int src_w) {
  // Canvas [-1, 1] to continuous pixel coordinates (pixel centers at integers).
  double fxp = (sx + 1.0) * src_w / 2.0 - 0.5;
  double fyp = (sy + 1.0) * src_h / 2.0 - 0.5;
  double x0f = std::floor(fxp);
  double y0f = std::floor(fyp);
  BilinearTap t;
  t.fx = fxp - x0f;
  t.fy = fyp - y0f;
  t.x0 = std::clamp(int(x0f), 0, src_w - 1);
  t.x1 = std::clamp(int(x0f) + 1, 0, src_w - 1);
  t.y0 = std::clamp(int(y0f), 0, src_h - 1);
  t.y1 = std::clamp(int(y0f) + 1, 0, src_h - 1);
  return t;
}

/// Maps an output pixel's canvas coords through the pose to source coords.
inline void pose_source_coords(const ViewPose& pose, double qx, double qy, double& sx,
                               double& sy) {
  if (pose.flip) qx = -qx;
  sx = pose.center_x + qx / pose.zoom;
  sy = pose.center_y + qy / pose.zoom;
}

/// Resamples `src` under the pose. The identity pose at matching resolution
/// reproduces the input bit-for-bit.
template <class S>
ImageT<S> pose_sample(const ImageT<S>& src, const ViewPose& pose, int out_res) {
  ImageT<S> out = ImageT<S>::zeros(out_res, out_res, src.c);
  for (int y = 0; y < out_res; ++y) {
    double qy = pixel_center(y, out_res);
    for (int x = 0; x < out_res; ++x) {
      double qx = pixel_center(x, out_res);
      double sx, sy;
      pose_source_coords(pose, qx, qy, sx, sy);
      BilinearTap t = bilinear_tap(sx, sy, src.h, src.w);
      for (int ch = 0; ch < src.c; ++ch) {
        double v00 = double(src.at(t.y0, t.x0, ch));
        double v10 = double(src.at(t.y0, t.x1, ch));
        double v01 = double(src.at(t.y1, t.x0, ch));
        double v11 = double(src.at(t.y1, t.x1, ch));
        double top = v00 + t.fx * (v10 - v00);
        double bot = v01 + t.fx * (v11 - v01);
        out.at(y, x, ch) = S(top + t.fy * (bot - top));
      }
    }
  }
  return out;
}

/// Adjoint of pose_sample: scatters the output-gradient back onto the source
/// grid with the same bilinear weights.
template <class S>
void pose_sample_backward(const ImageT<S>& grad_out, const ViewPose& pose, ImageT<S>& grad_src) {
  int out_res = grad_out.h;
  for (int y = 0; y < out_res; ++y) {
    double qy = pixel_center(y, out_res);
    for (int x = 0; x < out_res; ++x) {
      double qx = pixel_center(x, out_res);
      double sx, sy;
      pose_source_coords(pose, qx, qy, sx, sy);
      BilinearTap t = bilinear_tap(sx, sy, grad_src.h, grad_src.w);
      double w00 = (1.0 - t.fx) * (1.0 - t.fy);
      double w10 = t.fx * (1.0 - t.fy);
      double w01 = (1.0 - t.fx) * t.fy;
      double w11 = t.fx * t.fy;
      for (int ch = 0; ch < grad_src.c; ++ch) {
        double g = double(grad_out.at(y, x, ch));
        grad_src.at(t.y0, t.x0, ch) += S(w00 * g);
        grad_src.at(t.y0, t.x1, ch) += S(w10 * g);
        grad_src.at(t.y1, t.x0, ch) += S(w01 * g);
        grad_src.at(t.y1, t.x1, ch) += S(w11 * g);
      }
    }
  }
}

}  // namespace sdlab::scenes
