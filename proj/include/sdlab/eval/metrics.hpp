#pragma once

#include <sdlab/core/image.hpp>

#include <cmath>

namespace sdlab::eval {

/// Mean squared error over all pixels and channels; inputs in [0,1].
template <class S>
double mse(const ImageT<S>& a, const ImageT<S>& b) {
  require_same_shape(a, b, "mse");
  return (a.data.template cast<double>() - b.data.template cast<double>()).square().mean();
}

inline double psnr_from_mse(double m) {
  if (m < 1e-10) return 99.0;  // cap keeps reports finite
  return std::min(99.0, 10.0 * std::log10(1.0 / m));
}

template <class S>
double psnr(const ImageT<S>& a, const ImageT<S>& b) {
  return psnr_from_mse(mse(a, b));
}

/// Structural similarity with a 7x7 Gaussian window (sigma 1.5), k1=0.01,
/// k2=0.03, unit dynamic range. The window slides over fully-valid positions
/// only; channels are averaged. Symmetric in (a, b); ssim(x, x) == 1.
template <class S>
double ssim(const ImageT<S>& a, const ImageT<S>& b) {
  require_same_shape(a, b, "ssim");
  constexpr int kWin = 7;
  constexpr double kC1 = 0.01 * 0.01;
  constexpr double kC2 = 0.03 * 0.03;
  if (a.h < kWin || a.w < kWin)
    throw std::invalid_argument("ssim: image smaller than the 7x7 window");

  double win[kWin][kWin];
  double norm = 0.0;
  for (int i = 0; i < kWin; ++i)
    for (int j = 0; j < kWin; ++j) {
      const double dy = i - (kWin - 1) / 2.0;
      const double dx = j - (kWin - 1) / 2.0;
      win[i][j] = std::exp(-(dy * dy + dx * dx) / (2.0 * 1.5 * 1.5));
      norm += win[i][j];
    }
  for (int i = 0; i < kWin; ++i)
    for (int j = 0; j < kWin; ++j) win[i][j] /= norm;

  double total = 0.0;
  long count = 0;
  for (int ch = 0; ch < a.c; ++ch) {
    for (int y = 0; y + kWin <= a.h; ++y) {
      for (int x = 0; x + kWin <= a.w; ++x) {
        double ma = 0, mb = 0, va = 0, vb = 0, cov = 0;
        for (int i = 0; i < kWin; ++i)
          for (int j = 0; j < kWin; ++j) {
            const double pa = double(a.at(y + i, x + j, ch));
            const double pb = double(b.at(y + i, x + j, ch));
            ma += win[i][j] * pa;
            mb += win[i][j] * pb;
            va += win[i][j] * pa * pa;
            vb += win[i][j] * pb * pb;
            cov += win[i][j] * pa * pb;
          }
        va -= ma * ma;
        vb -= mb * mb;
        cov -= ma * mb;
        const double num = (2 * ma * mb + kC1) * (2 * cov + kC2);
        const double den = (ma * ma + mb * mb + kC1) * (va + vb + kC2);
        total += num / den;
        ++count;
      }
    }
  }
  return total / double(count);
}

}  // namespace sdlab::eval
