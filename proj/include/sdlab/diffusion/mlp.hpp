#pragma once

#include <sdlab/diffusion/nn.hpp>

#include <stdexcept>
#include <vector>

namespace sdlab::diffusion {

struct MlpConfig {
  int dim = 8;
  int hidden = 128;
  int time_feat_dim = 16;
  int emb_dim = 8;
  int vocab = 1;
  bool uses_null_condition = false;

  int null_code() const { return vocab - 1; }
};

template <class S>
struct MlpWorkspace {
  MatX<S> in0, h1, h1s_in, h2, h2s_in;  // cached layer inputs
  std::vector<int> cond;
  int n = 0;
};

/// Small fully connected denoiser for low-dimensional toy data; mirrors the
/// U-Net's interface so the same training loop and samplers drive both.
template <class S>
class MlpDenoiser {
 public:
  explicit MlpDenoiser(const MlpConfig& cfg) : cfg_(cfg) {
    const int in = cfg.dim + cfg.time_feat_dim + cfg.emb_dim;
    w1_ = arena_.allocate("lin1.w", Index(in) * cfg.hidden);
    b1_ = arena_.allocate("lin1.b", cfg.hidden);
    w2_ = arena_.allocate("lin2.w", Index(cfg.hidden) * cfg.hidden);
    b2_ = arena_.allocate("lin2.b", cfg.hidden);
    w3_ = arena_.allocate("lin3.w", Index(cfg.hidden) * cfg.dim);
    b3_ = arena_.allocate("lin3.b", cfg.dim);
    emb_ = arena_.allocate("cond.table", Index(cfg.vocab) * cfg.emb_dim);
    arena_.finalize();
  }

  const MlpConfig& config() const { return cfg_; }
  ParamArena<S>& params() { return arena_; }
  const ParamArena<S>& params() const { return arena_; }

  void init_params(Rng& rng) {
    const int in = cfg_.dim + cfg_.time_feat_dim + cfg_.emb_dim;
    fill_normal(arena_.data.segment(w1_, Index(in) * cfg_.hidden), rng, std::sqrt(2.0 / in));
    fill_normal(arena_.data.segment(w2_, Index(cfg_.hidden) * cfg_.hidden), rng,
                std::sqrt(2.0 / cfg_.hidden));
    fill_normal(arena_.data.segment(w3_, Index(cfg_.hidden) * cfg_.dim), rng,
                std::sqrt(1.0 / cfg_.hidden));
    fill_normal(arena_.data.segment(emb_, Index(cfg_.vocab) * cfg_.emb_dim), rng, 0.3);
  }

  MlpWorkspace<S> make_workspace() const { return {}; }

  MatX<S> forward(const MatX<S>& x, const std::vector<int>& t, const std::vector<int>& cond,
                  MlpWorkspace<S>& ws) const {
    const int n = int(t.size());
    if (x.rows() != n || x.cols() != cfg_.dim)
      throw std::invalid_argument("mlp denoiser: bad input shape");
    ws.n = n;
    ws.cond = cond;
    MatX<S> feat = sinusoidal_features<S>(t, cfg_.time_feat_dim);
    auto table = Eigen::Map<const MatX<S>>(arena_.data.data() + emb_, cfg_.emb_dim, cfg_.vocab);
    ws.in0.resize(n, x.cols() + feat.cols() + cfg_.emb_dim);
    for (int b = 0; b < n; ++b) {
      if (cond[std::size_t(b)] < 0 || cond[std::size_t(b)] >= cfg_.vocab)
        throw std::out_of_range("mlp denoiser: condition code outside vocab");
      ws.in0.row(b) << x.row(b), feat.row(b),
          table.col(cond[std::size_t(b)]).transpose();
    }
    ws.h1s_in = lin(ws.in0, w1_, b1_, cfg_.hidden);
    ws.h1 = silu(ws.h1s_in);
    ws.h2s_in = lin(ws.h1, w2_, b2_, cfg_.hidden);
    ws.h2 = silu(ws.h2s_in);
    return lin(ws.h2, w3_, b3_, cfg_.dim);
  }

  void backward(const MatX<S>& dY, MlpWorkspace<S>& ws, ParamArena<S>* grads) const {
    MatX<S> d = lin_bwd(dY, ws.h2, w3_, b3_, cfg_.hidden, cfg_.dim, grads);
    d = silu_backward(d, ws.h2s_in);
    d = lin_bwd(d, ws.h1, w2_, b2_, cfg_.hidden, cfg_.hidden, grads);
    d = silu_backward(d, ws.h1s_in);
    d = lin_bwd(d, ws.in0, w1_, b1_, int(ws.in0.cols()), cfg_.hidden, grads);
    if (grads) {
      auto dtable =
          Eigen::Map<MatX<S>>(grads->grad.data() + emb_, cfg_.emb_dim, cfg_.vocab);
      for (int b = 0; b < ws.n; ++b)
        dtable.col(ws.cond[std::size_t(b)]) +=
            d.row(b).segment(cfg_.dim + cfg_.time_feat_dim, cfg_.emb_dim).transpose();
    }
  }

 private:
  MlpConfig cfg_;
  ParamArena<S> arena_;
  Index w1_ = 0, b1_ = 0, w2_ = 0, b2_ = 0, w3_ = 0, b3_ = 0, emb_ = 0;

  template <class Seg>
  static void fill_normal(Seg&& seg, Rng& rng, double std) {
    for (Index i = 0; i < seg.size(); ++i) seg[i] = S(std * rng.normal());
  }

  MatX<S> lin(const MatX<S>& X, Index w_off, Index b_off, int out) const {
    Eigen::Map<const MatX<S>> W(arena_.data.data() + w_off, X.cols(), out);
    Eigen::Map<const Eigen::Matrix<S, 1, Eigen::Dynamic>> b(arena_.data.data() + b_off, out);
    MatX<S> Y = X * W;
    Y.rowwise() += b;
    return Y;
  }

  MatX<S> lin_bwd(const MatX<S>& dY, const MatX<S>& X, Index w_off, Index b_off, int in, int out,
                  ParamArena<S>* grads) const {
    Eigen::Map<const MatX<S>> W(arena_.data.data() + w_off, in, out);
    if (grads) {
      Eigen::Map<MatX<S>> dW(grads->grad.data() + w_off, in, out);
      dW.noalias() += X.transpose() * dY;
      Eigen::Map<Eigen::Matrix<S, 1, Eigen::Dynamic>> db(grads->grad.data() + b_off, out);
      db += dY.colwise().sum();
    }
    return dY * W.transpose();
  }
};

}  // namespace sdlab::diffusion
