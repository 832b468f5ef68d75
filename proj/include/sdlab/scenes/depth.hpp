#pragma once

#include <sdlab/core/image.hpp>

#include <algorithm>
#include <cmath>

namespace sdlab::scenes {

/// Depth-conditioning stand-in: normalized Sobel edge magnitude of the
/// channel-mean image. Constant inputs map to an all-zero plane; anything
/// else is scaled so the strongest edge is exactly 1.
template <class S>
ImageT<S> depth_proxy(const ImageT<S>& img) {
  const int h = img.h, w = img.w;
  ImageT<S> gray = ImageT<S>::zeros(h, w, 1);
  for (int ch = 0; ch < img.c; ++ch) gray.plane(0) += img.plane(ch);
  gray.data /= S(img.c);

  auto px = [&](int y, int x) {
    return double(gray.at(std::clamp(y, 0, h - 1), std::clamp(x, 0, w - 1), 0));
  };
  ImageT<S> out = ImageT<S>::zeros(h, w, 1);
  double max_mag = 0.0;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double gx = (px(y - 1, x + 1) + 2 * px(y, x + 1) + px(y + 1, x + 1)) -
                        (px(y - 1, x - 1) + 2 * px(y, x - 1) + px(y + 1, x - 1));
      const double gy = (px(y + 1, x - 1) + 2 * px(y + 1, x) + px(y + 1, x + 1)) -
                        (px(y - 1, x - 1) + 2 * px(y - 1, x) + px(y - 1, x + 1));
      const double mag = std::sqrt(gx * gx + gy * gy);
      out.at(y, x, 0) = S(mag);
      max_mag = std::max(max_mag, mag);
    }
  }
  if (max_mag > 0.0) out.data /= S(max_mag);
  return out;
}

}  // namespace sdlab::scenes
