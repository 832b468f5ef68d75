#pragma once

#include <sdlab/core/types.hpp>

#include <stdexcept>
#include <utility>

namespace sdlab {

/// Dense H x W x C raster stored as contiguous channel planes (row-major
/// within a plane). Element (y, x, ch) lives at ch*h*w + y*w + x.
template <class S>
struct ImageT {
  int h = 0;
  int w = 0;
  int c = 0;
  VecX<S> data;

  ImageT() = default;
  ImageT(int h_, int w_, int c_) : h(h_), w(w_), c(c_), data(VecX<S>::Zero(Index(h_) * w_ * c_)) {}

  static ImageT zeros(int h, int w, int c) { return ImageT(h, w, c); }
  static ImageT constant(int h, int w, int c, S value) {
    ImageT out(h, w, c);
    out.data.setConstant(value);
    return out;
  }

  Index size() const { return data.size(); }
  bool same_shape(const ImageT& o) const { return h == o.h && w == o.w && c == o.c; }

  S& at(int y, int x, int ch) { return data[Index(ch) * h * w + Index(y) * w + x]; }
  S at(int y, int x, int ch) const { return data[Index(ch) * h * w + Index(y) * w + x]; }

  Eigen::Map<VecX<S>> plane(int ch) { return {data.data() + Index(ch) * h * w, Index(h) * w}; }
  Eigen::Map<const VecX<S>> plane(int ch) const {
    return {data.data() + Index(ch) * h * w, Index(h) * w};
  }

  template <class T>
  ImageT<T> cast() const {
    ImageT<T> out;
    out.h = h;
    out.w = w;
    out.c = c;
    out.data = data.template cast<T>();
    return out;
  }
};

template <class S>
void require_same_shape(const ImageT<S>& a, const ImageT<S>& b, const char* where) {
  if (!a.same_shape(b))
    throw std::invalid_argument(std::string(where) + ": image shape mismatch");
}

/// Mirror around the vertical axis. Applying it twice is the identity.
template <class S>
ImageT<S> flip_horizontal(const ImageT<S>& img) {
  ImageT<S> out(img.h, img.w, img.c);
  for (int ch = 0; ch < img.c; ++ch)
    for (int y = 0; y < img.h; ++y)
      for (int x = 0; x < img.w; ++x) out.at(y, x, ch) = img.at(y, img.w - 1 - x, ch);
  return out;
}

template <class S>
ImageT<S> clamp01(const ImageT<S>& img) {
  ImageT<S> out = img;
  out.data = out.data.min(S(1)).max(S(0));
  return out;
}

/// Pixel-center coordinate of column/row i in [-1, 1].
inline double pixel_center(int i, int n) { return (2.0 * i + 1.0) / n - 1.0; }

}  // namespace sdlab
