#pragma once

#include <sdlab/core/image.hpp>

#include <string>

namespace sdlab {

/// 8-bit RGB encode of a [0,1] image (1 or 3 channels; 1 channel is
/// replicated). Values are clamped and rounded.
std::string encode_png(const ImageT<double>& img);

void write_png(const std::string& path, const ImageT<double>& img);

/// Decodes an 8-bit PNG to a [0,1] RGB image (gray and alpha variants are
/// expanded / stripped).
ImageT<double> read_png(const std::string& path);

template <class S>
void write_png_any(const std::string& path, const ImageT<S>& img) {
  write_png(path, img.template cast<double>());
}

}  // namespace sdlab
