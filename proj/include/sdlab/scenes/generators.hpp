#pragma once

#include <sdlab/core/image.hpp>
#include <sdlab/diffusion/nn.hpp>
#include <sdlab/scenes/pose.hpp>

#include <cmath>
#include <stdexcept>
#include <vector>

namespace sdlab::scenes {

template <class S>
S squash(S x) {
  return S(1) / (S(1) + std::exp(-x));
}
template <class S>
S squash_inverse(S y) {
  return std::log(y / (S(1) - y));
}

inline void check_pose(const ViewPose& pose) {
  if (!(pose.zoom > 0.0)) throw std::invalid_argument("render: zoom must be positive");
}

/// Raw pixel tensor generator: parameters are unconstrained reals squashed
/// into [0,1] at render time, then resampled under the view pose. The 2D
/// "identity mapping" case of generator-based editing.
template <class S>
struct PixelCanvas {
  int res = 32;
  VecX<S> theta;

  explicit PixelCanvas(int res_ = 32) : res(res_), theta(VecX<S>::Zero(Index(res_) * res_ * 3)) {}

  VecX<S>& params() { return theta; }
  const VecX<S>& params() const { return theta; }

  ImageT<S> squashed() const {
    ImageT<S> img;
    img.h = res;
    img.w = res;
    img.c = 3;
    img.data = theta.unaryExpr([](S v) { return squash(v); });
    return img;
  }

  ImageT<S> render(const ViewPose& pose, int out_res) const {
    check_pose(pose);
    ImageT<S> sq = squashed();
    if (pose.is_identity() && out_res == res) return sq;
    return pose_sample(sq, pose, out_res);
  }

  /// Accumulates d(loss)/d(theta) given d(loss)/d(rendered image).
  void render_backward(const ImageT<S>& dimg, const ViewPose& pose, VecX<S>& grad) const {
    check_pose(pose);
    ImageT<S> dsq = ImageT<S>::zeros(res, res, 3);
    if (pose.is_identity() && dimg.h == res) {
      dsq.data = dimg.data;
    } else {
      pose_sample_backward(dimg, pose, dsq);
    }
    grad += dsq.data * theta.unaryExpr([](S v) {
      S s = squash(v);
      return s * (S(1) - s);
    });
  }

  /// Closed-form fit to an identity-pose target: inverse-squash of the
  /// clamped pixel values.
  void fit_exact(const ImageT<S>& target, S margin = S(1e-4)) {
    if (target.h != res || target.w != res || target.c != 3)
      throw std::invalid_argument("PixelCanvas: target shape mismatch");
    theta = target.data.min(S(1) - margin).max(margin).unaryExpr(
        [](S v) { return squash_inverse(v); });
  }
};

struct NeuralCanvasConfig {
  int hidden = 64;
  int depth = 4;
  int octaves = 6;

  int feat_dim() const { return 2 + 4 * octaves; }
};

template <class S>
struct NeuralCanvasWorkspace {
  MatX<S> feats;
  std::vector<MatX<S>> lin_in;   // input to each linear layer
  std::vector<MatX<S>> silu_in;  // pre-activation of each hidden layer
  MatX<S> out_pre;               // pre-squash output
};

/// Coordinate network generator: sinusoidal features of the (u,v) source
/// coordinate feed a small MLP whose squashed output is the colour at that
/// point. Rendering evaluates the field directly at each output pixel's
/// pose-mapped coordinate, so views are exact rather than resampled.
template <class S>
class NeuralCanvas {
 public:
  explicit NeuralCanvas(const NeuralCanvasConfig& cfg = {}) : cfg_(cfg) {
    int in = cfg.feat_dim();
    for (int d = 0; d < cfg.depth; ++d) {
      w_.push_back(arena_.allocate("lin" + std::to_string(d) + ".w", Index(in) * cfg.hidden));
      b_.push_back(arena_.allocate("lin" + std::to_string(d) + ".b", cfg.hidden));
      in = cfg.hidden;
    }
    w_.push_back(arena_.allocate("out.w", Index(in) * 3));
    b_.push_back(arena_.allocate("out.b", 3));
    arena_.finalize();
  }

  const NeuralCanvasConfig& config() const { return cfg_; }
  VecX<S>& params() { return arena_.data; }
  const VecX<S>& params() const { return arena_.data; }

  void init_params(Rng& rng) {
    int in = cfg_.feat_dim();
    for (int d = 0; d < cfg_.depth; ++d) {
      fill(arena_.data.segment(w_[std::size_t(d)], Index(in) * cfg_.hidden), rng,
           std::sqrt(2.0 / in));
      in = cfg_.hidden;
    }
    fill(arena_.data.segment(w_.back(), Index(in) * 3), rng, 0.1);
  }

  ImageT<S> render(const ViewPose& pose, int res, NeuralCanvasWorkspace<S>& ws) const {
    check_pose(pose);
    const Index hw = Index(res) * res;
    ws.feats.resize(hw, cfg_.feat_dim());
    for (int y = 0; y < res; ++y) {
      for (int x = 0; x < res; ++x) {
        double sx, sy;
        pose_source_coords(pose, pixel_center(x, res), pixel_center(y, res), sx, sy);
        fill_features(ws.feats, Index(y) * res + x, sx, sy);
      }
    }
    ws.lin_in.assign(std::size_t(cfg_.depth) + 1, {});
    ws.silu_in.assign(std::size_t(cfg_.depth), {});
    MatX<S> h = ws.feats;
    int in = cfg_.feat_dim();
    for (int d = 0; d < cfg_.depth; ++d) {
      ws.lin_in[std::size_t(d)] = h;
      ws.silu_in[std::size_t(d)] = lin(h, std::size_t(d), in, cfg_.hidden);
      h = diffusion::silu(ws.silu_in[std::size_t(d)]);
      in = cfg_.hidden;
    }
    ws.lin_in[std::size_t(cfg_.depth)] = h;
    ws.out_pre = lin(h, std::size_t(cfg_.depth), in, 3);
    ImageT<S> img;
    img.h = res;
    img.w = res;
    img.c = 3;
    img.data.resize(hw * 3);
    Eigen::Map<MatX<S>>(img.data.data(), hw, 3) =
        ws.out_pre.unaryExpr([](S v) { return squash(v); });
    return img;
  }

  ImageT<S> render(const ViewPose& pose, int res) const {
    NeuralCanvasWorkspace<S> ws;
    return render(pose, res, ws);
  }

  /// Accumulates d(loss)/d(params); must follow a render() with this ws.
  void render_backward(const ImageT<S>& dimg, const NeuralCanvasWorkspace<S>& ws,
                       VecX<S>& grad) const {
    const Index hw = Index(dimg.h) * dimg.w;
    MatX<S> d = Eigen::Map<const MatX<S>>(dimg.data.data(), hw, 3);
    d = (d.array() * ws.out_pre.unaryExpr([](S v) {
          S s = squash(v);
          return s * (S(1) - s);
        }).array()).matrix();
    int in = cfg_.hidden;
    d = lin_bwd(d, std::size_t(cfg_.depth), in, 3, ws.lin_in[std::size_t(cfg_.depth)], grad);
    for (int dpt = cfg_.depth - 1; dpt >= 0; --dpt) {
      d = diffusion::silu_backward(d, ws.silu_in[std::size_t(dpt)]);
      in = dpt == 0 ? cfg_.feat_dim() : cfg_.hidden;
      d = lin_bwd(d, std::size_t(dpt), in, cfg_.hidden, ws.lin_in[std::size_t(dpt)], grad);
    }
  }

 private:
  NeuralCanvasConfig cfg_;
  diffusion::ParamArena<S> arena_;
  std::vector<Index> w_, b_;

  template <class Seg>
  static void fill(Seg&& seg, Rng& rng, double std) {
    for (Index i = 0; i < seg.size(); ++i) seg[i] = S(std * rng.normal());
  }

  void fill_features(MatX<S>& F, Index row, double u, double v) const {
    F(row, 0) = S(u);
    F(row, 1) = S(v);
    for (int o = 0; o < cfg_.octaves; ++o) {
      const double f = std::pow(2.0, o) * M_PI;
      F(row, 2 + 4 * o + 0) = S(std::sin(f * u));
      F(row, 2 + 4 * o + 1) = S(std::cos(f * u));
      F(row, 2 + 4 * o + 2) = S(std::sin(f * v));
      F(row, 2 + 4 * o + 3) = S(std::cos(f * v));
    }
  }

  MatX<S> lin(const MatX<S>& X, std::size_t layer, int in, int out) const {
    Eigen::Map<const MatX<S>> W(arena_.data.data() + w_[layer], in, out);
    Eigen::Map<const Eigen::Matrix<S, 1, Eigen::Dynamic>> b(arena_.data.data() + b_[layer], out);
    MatX<S> Y = X * W;
    Y.rowwise() += b;
    return Y;
  }

  MatX<S> lin_bwd(const MatX<S>& dY, std::size_t layer, int in, int out, const MatX<S>& X,
                  VecX<S>& grad) const {
    Eigen::Map<const MatX<S>> W(arena_.data.data() + w_[layer], in, out);
    Eigen::Map<MatX<S>> dW(grad.data() + w_[layer], in, out);
    dW.noalias() += X.transpose() * dY;
    Eigen::Map<Eigen::Matrix<S, 1, Eigen::Dynamic>> db(grad.data() + b_[layer], out);
    db += dY.colwise().sum();
    return dY * W.transpose();
  }
};

struct FitConfig {
  int steps = 2000;
  double lr = 5e-3;
  double warn_below_db = 20.0;
  std::uint64_t seed = 0;
};

struct FitResult {
  double final_psnr = 0.0;
  int steps_run = 0;
  bool converged = true;  // false when PSNR stayed below the warning level
};

template <class S>
double pairs_psnr_pixel(const PixelCanvas<S>& g,
                        const std::vector<std::pair<ImageT<S>, ViewPose>>& pairs) {
  double m = 0.0;
  for (const auto& [img, pose] : pairs) {
    ImageT<S> r = g.render(pose, img.h);
    m += double((r.data - img.data).square().mean());
  }
  m /= double(pairs.size());
  return m < 1e-10 ? 99.0 : 10.0 * std::log10(1.0 / m);
}

/// Fits the pixel canvas to (image, pose) observations. A single
/// identity-pose target is inverted in closed form; otherwise adaptive
/// gradient descent on the mean reconstruction error.
template <class S>
FitResult fit_generator(PixelCanvas<S>& g,
                        const std::vector<std::pair<ImageT<S>, ViewPose>>& pairs,
                        const FitConfig& cfg = {}) {
  if (pairs.empty()) throw std::invalid_argument("fit_generator: need at least one pair");
  FitResult res;
  if (pairs.size() == 1 && pairs[0].second.is_identity() && pairs[0].first.h == g.res) {
    g.fit_exact(pairs[0].first);
  } else {
    diffusion::Adam<S> opt(g.theta.size());
    VecX<S> grad(g.theta.size());
    for (int step = 0; step < cfg.steps; ++step) {
      const auto& [img, pose] = pairs[std::size_t(step) % pairs.size()];
      ImageT<S> r = g.render(pose, img.h);
      ImageT<S> dimg = r;
      dimg.data = S(2.0 / double(r.size())) * (r.data - img.data);
      grad.setZero();
      g.render_backward(dimg, pose, grad);
      opt.step(g.theta, grad, cfg.lr);
      ++res.steps_run;
    }
  }
  res.final_psnr = pairs_psnr_pixel(g, pairs);
  res.converged = res.final_psnr >= cfg.warn_below_db;
  return res;
}

template <class S>
FitResult fit_generator(NeuralCanvas<S>& g,
                        const std::vector<std::pair<ImageT<S>, ViewPose>>& pairs,
                        const FitConfig& cfg = {}) {
  if (pairs.empty()) throw std::invalid_argument("fit_generator: need at least one pair");
  FitResult res;
  diffusion::Adam<S> opt(g.params().size());
  VecX<S> grad(g.params().size());
  NeuralCanvasWorkspace<S> ws;
  for (int step = 0; step < cfg.steps; ++step) {
    const auto& [img, pose] = pairs[std::size_t(step) % pairs.size()];
    ImageT<S> r = g.render(pose, img.h, ws);
    ImageT<S> dimg = r;
    dimg.data = S(2.0 / double(r.size())) * (r.data - img.data);
    grad.setZero();
    g.render_backward(dimg, ws, grad);
    opt.step(g.params(), grad, cfg.lr);
    ++res.steps_run;
  }
  double m = 0.0;
  for (const auto& [img, pose] : pairs) {
    ImageT<S> r = g.render(pose, img.h);
    m += double((r.data - img.data).square().mean());
  }
  m /= double(pairs.size());
  res.final_psnr = m < 1e-10 ? 99.0 : 10.0 * std::log10(1.0 / m);
  res.converged = res.final_psnr >= cfg.warn_below_db;
  return res;
}

}  // namespace sdlab::scenes
