#pragma once

#include <sdlab/core/rng.hpp>
#include <sdlab/core/types.hpp>

#include <cmath>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace sdlab::diffusion {

/// All trainable parameters of a model live in one flat vector, addressed by
/// named spans. Gradients mirror the layout, so optimizers, checkpoints and
/// hashing operate on a single contiguous array.
template <class S>
struct ParamArena {
  struct Span {
    std::string name;
    Index offset = 0;
    Index size = 0;
  };

  VecX<S> data;
  VecX<S> grad;
  std::vector<Span> spans;
  std::unordered_map<std::string, std::size_t> index;
  Index reserved = 0;
  bool finalized = false;

  Index allocate(const std::string& name, Index n) {
    if (finalized) throw std::logic_error("ParamArena: allocate after finalize: " + name);
    if (index.count(name)) throw std::logic_error("ParamArena: duplicate span: " + name);
    Span s{name, reserved, n};
    index.emplace(name, spans.size());
    spans.push_back(s);
    reserved += n;
    return s.offset;
  }

  void finalize() {
    data = VecX<S>::Zero(reserved);
    grad = VecX<S>::Zero(reserved);
    finalized = true;
  }

  Index size() const { return reserved; }
  void zero_grad() { grad.setZero(); }

  const Span& span(const std::string& name) const {
    auto it = index.find(name);
    if (it == index.end()) throw std::out_of_range("ParamArena: unknown span: " + name);
    return spans[it->second];
  }

  auto view(const std::string& name) { return data.segment(span(name).offset, span(name).size); }
  auto view(const std::string& name) const {
    return data.segment(span(name).offset, span(name).size);
  }
};

/// Adam with optional cosine learning-rate decay handled by the caller.
template <class S>
struct Adam {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  VecX<S> m, v;
  long steps = 0;

  explicit Adam(Index n, double b1 = 0.9, double b2 = 0.999, double e = 1e-8)
      : beta1(b1), beta2(b2), eps(e), m(VecX<S>::Zero(n)), v(VecX<S>::Zero(n)) {}

  void step(VecX<S>& params, const VecX<S>& grads, double lr) {
    ++steps;
    m = S(beta1) * m + S(1.0 - beta1) * grads;
    v = S(beta2) * v + S(1.0 - beta2) * grads.square();
    double bc1 = 1.0 - std::pow(beta1, double(steps));
    double bc2 = 1.0 - std::pow(beta2, double(steps));
    params -= S(lr / bc1) * m / ((v / S(bc2)).sqrt() + S(eps));
  }
};

inline int conv_out_size(int in, int k, int stride, int pad) {
  return (in + 2 * pad - k) / stride + 1;
}

/// Unrolls k-by-k patches into rows of P. Activations are (n*h*w x c)
/// matrices, pixel-major within each sample; P is (n*oh*ow x c*k*k) with
/// column index c*k*k + ky*k + kx. Out-of-bounds taps read as zero.
template <class S>
void im2col(const MatX<S>& X, int n, int h, int w, int k, int stride, int pad, MatX<S>& P) {
  const int c = int(X.cols());
  const int oh = conv_out_size(h, k, stride, pad);
  const int ow = conv_out_size(w, k, stride, pad);
  P.setZero(Index(n) * oh * ow, Index(c) * k * k);
  for (int ch = 0; ch < c; ++ch) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const Index col = Index(ch) * k * k + ky * k + kx;
        for (int b = 0; b < n; ++b) {
          for (int oy = 0; oy < oh; ++oy) {
            const int sy = oy * stride - pad + ky;
            if (sy < 0 || sy >= h) continue;
            const Index prow0 = Index(b) * oh * ow + Index(oy) * ow;
            const Index xrow0 = Index(b) * h * w + Index(sy) * w;
            for (int ox = 0; ox < ow; ++ox) {
              const int sx = ox * stride - pad + kx;
              if (sx < 0 || sx >= w) continue;
              P(prow0 + ox, col) = X(xrow0 + sx, ch);
            }
          }
        }
      }
    }
  }
}

/// Adjoint of im2col: scatter-adds patch gradients back onto the input grid.
template <class S>
void col2im(const MatX<S>& dP, int n, int h, int w, int k, int stride, int pad, MatX<S>& dX) {
  const int c = int(dX.cols());
  const int oh = conv_out_size(h, k, stride, pad);
  const int ow = conv_out_size(w, k, stride, pad);
  for (int ch = 0; ch < c; ++ch) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const Index col = Index(ch) * k * k + ky * k + kx;
        for (int b = 0; b < n; ++b) {
          for (int oy = 0; oy < oh; ++oy) {
            const int sy = oy * stride - pad + ky;
            if (sy < 0 || sy >= h) continue;
            const Index prow0 = Index(b) * oh * ow + Index(oy) * ow;
            const Index xrow0 = Index(b) * h * w + Index(sy) * w;
            for (int ox = 0; ox < ow; ++ox) {
              const int sx = ox * stride - pad + kx;
              if (sx < 0 || sx >= w) continue;
              dX(xrow0 + sx, ch) += dP(prow0 + ox, col);
            }
          }
        }
      }
    }
  }
}

/// x * sigmoid(x), elementwise.
template <class S>
MatX<S> silu(const MatX<S>& X) {
  return X.array() / (S(1) + (-X.array()).exp());
}

template <class S>
MatX<S> silu_backward(const MatX<S>& dY, const MatX<S>& X) {
  auto s = (S(1) / (S(1) + (-X.array()).exp())).eval();
  return dY.array() * (s + X.array() * s * (S(1) - s));
}

/// Per-sample, per-group normalization over (channels-in-group x all pixels),
/// then per-channel affine. Caches xhat and the inverse stddev for backward.
template <class S>
struct GroupNormCache {
  MatX<S> xhat;
  MatX<S> inv_std;  // n x groups
};

template <class S, class GammaT, class BetaT>
MatX<S> groupnorm_forward(const MatX<S>& X, int n, int groups, const GammaT& gamma,
                          const BetaT& beta, GroupNormCache<S>& cache, double eps = 1e-5) {
  const Index c = X.cols();
  if (c % groups != 0) throw std::invalid_argument("groupnorm: channels not divisible by groups");
  const Index cg = c / groups;
  const Index hw = X.rows() / n;
  cache.xhat.resize(X.rows(), c);
  cache.inv_std.resize(n, groups);
  for (int b = 0; b < n; ++b) {
    for (int g = 0; g < groups; ++g) {
      auto blk = X.block(Index(b) * hw, g * cg, hw, cg);
      S mean = blk.mean();
      S var = (blk.array() - mean).square().mean();
      S inv = S(1) / std::sqrt(var + S(eps));
      cache.inv_std(b, g) = inv;
      cache.xhat.block(Index(b) * hw, g * cg, hw, cg) = (blk.array() - mean) * inv;
    }
  }
  MatX<S> Y(X.rows(), c);
  for (Index ch = 0; ch < c; ++ch)
    Y.col(ch) = cache.xhat.col(ch) * gamma(ch) + VecX<S>::Constant(X.rows(), beta(ch)).matrix();
  return Y;
}

template <class S, class GammaT, class DGammaT, class DBetaT>
MatX<S> groupnorm_backward(const MatX<S>& dY, int n, int groups, const GammaT& gamma,
                           const GroupNormCache<S>& cache, DGammaT&& dgamma, DBetaT&& dbeta) {
  const Index c = dY.cols();
  const Index cg = c / groups;
  const Index hw = dY.rows() / n;
  MatX<S> dxhat(dY.rows(), c);
  for (Index ch = 0; ch < c; ++ch) {
    dgamma(ch) += (dY.col(ch).array() * cache.xhat.col(ch).array()).sum();
    dbeta(ch) += dY.col(ch).sum();
    dxhat.col(ch) = dY.col(ch) * gamma(ch);
  }
  MatX<S> dX(dY.rows(), c);
  for (int b = 0; b < n; ++b) {
    for (int g = 0; g < groups; ++g) {
      auto dxh = dxhat.block(Index(b) * hw, g * cg, hw, cg);
      auto xh = cache.xhat.block(Index(b) * hw, g * cg, hw, cg);
      S m1 = dxh.mean();
      S m2 = (dxh.array() * xh.array()).mean();
      dX.block(Index(b) * hw, g * cg, hw, cg) =
          cache.inv_std(b, g) * (dxh.array() - m1 - xh.array() * m2);
    }
  }
  return dX;
}

/// Nearest-neighbour 2x upsampling on the flat pixel-major layout.
template <class S>
MatX<S> upsample2x(const MatX<S>& X, int n, int h, int w) {
  MatX<S> Y(Index(n) * 4 * h * w, X.cols());
  const int oh = 2 * h, ow = 2 * w;
  for (int b = 0; b < n; ++b)
    for (int oy = 0; oy < oh; ++oy)
      for (int ox = 0; ox < ow; ++ox)
        Y.row(Index(b) * oh * ow + Index(oy) * ow + ox) =
            X.row(Index(b) * h * w + Index(oy / 2) * w + ox / 2);
  return Y;
}

template <class S>
MatX<S> upsample2x_backward(const MatX<S>& dY, int n, int h, int w) {
  MatX<S> dX = MatX<S>::Zero(Index(n) * h * w, dY.cols());
  const int oh = 2 * h, ow = 2 * w;
  for (int b = 0; b < n; ++b)
    for (int oy = 0; oy < oh; ++oy)
      for (int ox = 0; ox < ow; ++ox)
        dX.row(Index(b) * h * w + Index(oy / 2) * w + ox / 2) +=
            dY.row(Index(b) * oh * ow + Index(oy) * ow + ox);
  return dX;
}

/// Transformer-style sinusoidal features of the integer timestep.
template <class S>
MatX<S> sinusoidal_features(const std::vector<int>& t, int dim) {
  const int half = dim / 2;
  MatX<S> F(Index(t.size()), dim);
  for (std::size_t b = 0; b < t.size(); ++b) {
    for (int i = 0; i < half; ++i) {
      double freq = std::exp(-std::log(10000.0) * double(i) / double(half - 1));
      F(Index(b), i) = S(std::sin(t[b] * freq));
      F(Index(b), half + i) = S(std::cos(t[b] * freq));
    }
  }
  return F;
}

}  // namespace sdlab::diffusion
