#pragma once

#include <sdlab/core/image.hpp>
#include <sdlab/diffusion/nn.hpp>
#include <sdlab/diffusion/schedule.hpp>

#include <array>
#include <memory>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

namespace sdlab::diffusion {

/// Activation matrices are (n*h*w x channels), pixel-major per sample; an
/// image's channel planes map onto columns without copying.
template <class S>
Eigen::Map<const MatX<S>> image_to_act(const ImageT<S>& img) {
  return Eigen::Map<const MatX<S>>(img.data.data(), Index(img.h) * img.w, img.c);
}

template <class S>
MatX<S> stack_images(const std::vector<ImageT<S>>& imgs) {
  if (imgs.empty()) throw std::invalid_argument("stack_images: empty batch");
  const Index hw = Index(imgs[0].h) * imgs[0].w;
  MatX<S> act(hw * Index(imgs.size()), imgs[0].c);
  for (std::size_t i = 0; i < imgs.size(); ++i) {
    require_same_shape(imgs[0], imgs[i], "stack_images");
    act.block(Index(i) * hw, 0, hw, imgs[0].c) = image_to_act(imgs[i]);
  }
  return act;
}

template <class S>
ImageT<S> act_to_image(const MatX<S>& act, int h, int w, Index sample = 0) {
  ImageT<S> img = ImageT<S>::zeros(h, w, int(act.cols()));
  const Index hw = Index(h) * w;
  Eigen::Map<MatX<S>>(img.data.data(), hw, img.c) = act.block(sample * hw, 0, hw, act.cols());
  return img;
}

struct UNetConfig {
  int res = 32;
  int img_channels = 3;
  bool spatial_cond = false;  // extra input channel carrying a depth proxy
  int base_width = 24;
  std::array<int, 3> mult = {1, 2, 4};
  int emb_dim = 64;
  int time_feat_dim = 32;
  int groups = 8;
  int vocab = 73;  // attribute codes plus one reserved null code
  bool uses_null_condition = true;

  int in_channels() const { return img_channels + (spatial_cond ? 1 : 0); }
  int null_code() const { return vocab - 1; }
  int width(int level) const { return base_width * mult[std::size_t(level)]; }
};

/// Per-call caches reused across forward/backward and across invocations to
/// avoid reallocation in hot loops.
template <class S>
struct DenoiserWorkspace {
  std::vector<MatX<S>> conv_P;       // im2col patches, by conv id
  std::vector<MatX<S>> conv_lora_h;  // P*A of the low-rank path, by conv id
  std::vector<MatX<S>> conv_in;      // conv input activations, by conv id
  std::vector<GroupNormCache<S>> gn;
  std::vector<MatX<S>> silu_in;
  std::vector<MatX<S>> lin_in;
  std::vector<MatX<S>> stage;  // stashed activations (skips, resblock temps)
  MatX<S> emb_silu;            // shared silu(time+cond embedding), (n x emb_dim)
  MatX<S> demb_silu;           // its gradient accumulator
  MatX<S> emb_pre;             // pre-silu embedding
  std::vector<int> t, cond;    // the batch this workspace was filled with
  int n = 0;
};

/// Low-rank additive deltas attached to every convolution of the base model.
/// With the second factor at zero the deltas vanish identically, so a fresh
/// stack leaves the base model's outputs untouched.
template <class S>
struct AdapterStack {
  int rank = 4;
  ParamArena<S> arena;
  std::vector<Index> a_off, b_off;  // by conv id
  std::vector<int> cin_k2, cout;    // factor shapes by conv id

  Index size() const { return arena.size(); }
};

template <class S>
class ConditionedDenoiser {
 public:
  struct Conv {
    int cin = 0, cout = 0, k = 3, stride = 1, pad = 1;
    Index w_off = 0, b_off = 0;
    int id = -1;
    std::string name;
  };
  struct Norm {
    int channels = 0;
    Index g_off = 0, b_off = 0;
    int id = -1;
  };
  struct Lin {
    int in = 0, out = 0;
    Index w_off = 0, b_off = 0;
    int id = -1;
  };
  struct ResBlock {
    Norm gn1, gn2;
    Conv conv1, conv2, skip;
    Lin emb_lin;
    int silu1 = -1, silu2 = -1;
    bool has_skip_conv = false;
    int cin = 0, cout = 0;
  };

  explicit ConditionedDenoiser(const UNetConfig& cfg) : cfg_(cfg) { build(); }

  const UNetConfig& config() const { return cfg_; }
  ParamArena<S>& params() { return arena_; }
  const ParamArena<S>& params() const { return arena_; }
  int num_convs() const { return conv_count_; }
  const std::vector<Conv*>& convs() const { return conv_list_; }

  void init_params(Rng& rng) {
    for (Conv* c : conv_list_) {
      bool zero = zero_init_.count(c->name) > 0;
      double std = zero ? 0.0 : std::sqrt(2.0 / (double(c->cin) * c->k * c->k));
      auto w = arena_.data.segment(c->w_off, Index(c->cin) * c->k * c->k * c->cout);
      for (Index i = 0; i < w.size(); ++i) w[i] = S(std * rng.normal());
      arena_.data.segment(c->b_off, c->cout).setZero();
    }
    for (Norm* nmkk : norm_list_) {
      arena_.data.segment(nmkk->g_off, nmkk->channels).setConstant(S(1));
      arena_.data.segment(nmkk->b_off, nmkk->channels).setZero();
    }
    for (Lin* l : lin_list_) {
      double std = std::sqrt(1.0 / double(l->in));
      auto w = arena_.data.segment(l->w_off, Index(l->in) * l->out);
      for (Index i = 0; i < w.size(); ++i) w[i] = S(std * rng.normal());
      arena_.data.segment(l->b_off, l->out).setZero();
    }
    auto emb = arena_.data.segment(cond_off_, Index(cfg_.vocab) * cfg_.emb_dim);
    for (Index i = 0; i < emb.size(); ++i) emb[i] = S(0.3 * rng.normal());
  }

  AdapterStack<S> make_adapters(Rng& rng, int rank = 4) const {
    AdapterStack<S> ad;
    ad.rank = rank;
    ad.a_off.resize(std::size_t(conv_count_));
    ad.b_off.resize(std::size_t(conv_count_));
    ad.cin_k2.resize(std::size_t(conv_count_));
    ad.cout.resize(std::size_t(conv_count_));
    for (Conv* c : conv_list_) {
      Index k2 = Index(c->cin) * c->k * c->k;
      ad.a_off[std::size_t(c->id)] = ad.arena.allocate(c->name + ".lora_a", k2 * rank);
      ad.b_off[std::size_t(c->id)] = ad.arena.allocate(c->name + ".lora_b", Index(rank) * c->cout);
      ad.cin_k2[std::size_t(c->id)] = int(k2);
      ad.cout[std::size_t(c->id)] = c->cout;
    }
    ad.arena.finalize();
    for (Conv* c : conv_list_) {
      Index k2 = Index(c->cin) * c->k * c->k;
      double std = std::sqrt(1.0 / double(k2));
      auto a = ad.arena.data.segment(ad.a_off[std::size_t(c->id)], k2 * rank);
      for (Index i = 0; i < a.size(); ++i) a[i] = S(std * rng.normal());
      // Second factor starts at zero: the adapter is exactly inert until trained.
    }
    return ad;
  }

  /// Rejects adapter stacks built for a different conv layout before any
  /// offset arithmetic can run off the end of their arena.
  void check_adapters(const AdapterStack<S>& ad) const {
    bool ok = int(ad.cin_k2.size()) == conv_count_;
    if (ok)
      for (Conv* c : conv_list_)
        ok = ok && ad.cin_k2[std::size_t(c->id)] == c->cin * c->k * c->k &&
             ad.cout[std::size_t(c->id)] == c->cout;
    if (!ok)
      throw std::invalid_argument("adapter stack does not match this denoiser architecture");
  }

  DenoiserWorkspace<S> make_workspace() const {
    DenoiserWorkspace<S> ws;
    ws.conv_P.resize(std::size_t(conv_count_));
    ws.conv_lora_h.resize(std::size_t(conv_count_));
    ws.conv_in.resize(std::size_t(conv_count_));
    ws.gn.resize(std::size_t(norm_count_));
    ws.silu_in.resize(std::size_t(silu_count_));
    ws.lin_in.resize(std::size_t(lin_count_));
    ws.stage.resize(16);
    return ws;
  }

  /// Predicts the noise content of x_t. `x` is (n*res^2 x in_channels);
  /// timesteps and condition codes are per-sample. Pass adapters to add the
  /// low-rank deltas on every convolution.
  MatX<S> forward(const MatX<S>& x, const std::vector<int>& t, const std::vector<int>& cond,
                  DenoiserWorkspace<S>& ws, const AdapterStack<S>* adapters = nullptr) const {
    const int n = int(t.size());
    if (x.cols() != cfg_.in_channels())
      throw std::invalid_argument("denoiser: wrong input channel count");
    if (x.rows() != Index(n) * cfg_.res * cfg_.res)
      throw std::invalid_argument("denoiser: activation rows do not match batch");
    if (cond.size() != t.size())
      throw std::invalid_argument("denoiser: cond/t size mismatch");
    for (int code : cond)
      if (code < 0 || code >= cfg_.vocab)
        throw std::out_of_range("denoiser: condition code outside vocab");
    if (adapters) check_adapters(*adapters);
    ws.n = n;
    ws.t = t;
    ws.cond = cond;

    // Shared embedding: sinusoidal(t) -> mlp, plus the condition row.
    MatX<S> feat = sinusoidal_features<S>(t, cfg_.time_feat_dim);
    MatX<S> e1 = lin_forward(time_lin1_, feat, ws);
    MatX<S> e1s = silu_at(time_silu_, e1, ws);
    MatX<S> emb = lin_forward(time_lin2_, e1s, ws);
    auto table = cond_table();
    for (int b = 0; b < n; ++b) emb.row(b) += table.col(cond[std::size_t(b)]).transpose();
    ws.emb_pre = emb;
    ws.emb_silu = silu(emb);
    ws.demb_silu = MatX<S>::Zero(emb.rows(), emb.cols());

    const int r0 = cfg_.res, r1 = r0 / 2, r2 = r0 / 4;
    MatX<S> h = conv_forward(stem_, x, n, r0, r0, ws, adapters);
    MatX<S> s0 = resblock_forward(rb_d0_, h, n, r0, r0, ws, adapters);
    MatX<S> d0 = conv_forward(down0_, s0, n, r0, r0, ws, adapters);
    MatX<S> s1 = resblock_forward(rb_d1_, d0, n, r1, r1, ws, adapters);
    MatX<S> d1 = conv_forward(down1_, s1, n, r1, r1, ws, adapters);
    MatX<S> m = resblock_forward(rb_m1_, d1, n, r2, r2, ws, adapters);
    m = resblock_forward(rb_m2_, m, n, r2, r2, ws, adapters);

    MatX<S> u1 = upsample2x(m, n, r2, r2);
    u1 = conv_forward(upc1_, u1, n, r1, r1, ws, adapters);
    MatX<S> cat1(u1.rows(), u1.cols() + s1.cols());
    cat1 << u1, s1;
    MatX<S> v1 = resblock_forward(rb_u1_, cat1, n, r1, r1, ws, adapters);

    MatX<S> u0 = upsample2x(v1, n, r1, r1);
    u0 = conv_forward(upc0_, u0, n, r0, r0, ws, adapters);
    MatX<S> cat0(u0.rows(), u0.cols() + s0.cols());
    cat0 << u0, s0;
    MatX<S> v0 = resblock_forward(rb_u0_, cat0, n, r0, r0, ws, adapters);

    MatX<S> hn = norm_forward(head_gn_, v0, n, ws);
    MatX<S> hs = silu_at(head_silu_, hn, ws);
    return conv_forward(head_, hs, n, r0, r0, ws, adapters);
  }

  /// Accumulates d(loss)/d(params) given d(loss)/d(output). Pass a base
  /// arena to train the base model, an adapter-gradient stack to train
  /// adapters, or both. The input gradient is computed and discarded.
  void backward(const MatX<S>& dY, DenoiserWorkspace<S>& ws, ParamArena<S>* base_grads,
                const AdapterStack<S>* adapters = nullptr,
                AdapterStack<S>* adapter_grads = nullptr) const {
    const int n = ws.n;
    const int r0 = cfg_.res, r1 = r0 / 2, r2 = r0 / 4;
    Grads g{base_grads, adapters, adapter_grads};

    MatX<S> d = conv_backward(head_, dY, n, r0, r0, ws, g);
    d = silu_backward_at(head_silu_, d, ws);
    d = norm_backward(head_gn_, d, n, ws, g);
    d = resblock_backward(rb_u0_, d, n, r0, r0, ws, g);
    MatX<S> du0 = d.leftCols(rb_u0_.cin - rb_d0_.cout);
    MatX<S> ds0 = d.rightCols(rb_d0_.cout);
    d = conv_backward(upc0_, du0, n, r0, r0, ws, g);
    d = upsample2x_backward(d, n, r1, r1);

    d = resblock_backward(rb_u1_, d, n, r1, r1, ws, g);
    MatX<S> du1 = d.leftCols(rb_u1_.cin - rb_d1_.cout);
    MatX<S> ds1 = d.rightCols(rb_d1_.cout);
    d = conv_backward(upc1_, du1, n, r1, r1, ws, g);
    d = upsample2x_backward(d, n, r2, r2);

    d = resblock_backward(rb_m2_, d, n, r2, r2, ws, g);
    d = resblock_backward(rb_m1_, d, n, r2, r2, ws, g);
    d = conv_backward(down1_, d, n, r1, r1, ws, g);
    d += ds1;
    d = resblock_backward(rb_d1_, d, n, r1, r1, ws, g);
    d = conv_backward(down0_, d, n, r0, r0, ws, g);
    d += ds0;
    d = resblock_backward(rb_d0_, d, n, r0, r0, ws, g);
    conv_backward(stem_, d, n, r0, r0, ws, g);

    // Embedding path: every resblock deposited into demb_silu.
    MatX<S> demb = silu_backward(ws.demb_silu, ws.emb_pre);
    if (base_grads) {
      auto dtable = cond_table_grad(*base_grads);
      for (int b = 0; b < n; ++b)
        dtable.col(ws.cond[std::size_t(b)]) += demb.row(b).transpose();
    }
    MatX<S> de1s = lin_backward(time_lin2_, demb, ws, g);
    MatX<S> de1 = silu_backward_at(time_silu_, de1s, ws);
    lin_backward(time_lin1_, de1, ws, g);
  }

  /// Classifier-free guidance. Scale 1 evaluates only the conditional
  /// branch; scale 0 only the unconditional one; anything else blends the
  /// two and requires a model trained with the null code.
  MatX<S> predict_cfg(const MatX<S>& x, const std::vector<int>& t, const std::vector<int>& cond,
                      double scale, DenoiserWorkspace<S>& ws,
                      const AdapterStack<S>* adapters = nullptr) const {
    if (scale == 1.0) return forward(x, t, cond, ws, adapters);
    if (!cfg_.uses_null_condition)
      throw std::invalid_argument("cfg: guidance != 1 requires null-condition support");
    std::vector<int> null_cond(cond.size(), cfg_.null_code());
    if (scale == 0.0) return forward(x, t, null_cond, ws, adapters);
    MatX<S> ec = forward(x, t, cond, ws, adapters);
    MatX<S> eu = forward(x, t, null_cond, ws, adapters);
    return eu + S(scale) * (ec - eu);
  }

 private:
  struct Grads {
    ParamArena<S>* base = nullptr;
    const AdapterStack<S>* ad = nullptr;
    AdapterStack<S>* ad_g = nullptr;
  };

  UNetConfig cfg_;
  ParamArena<S> arena_;
  Conv stem_, down0_, down1_, upc1_, upc0_, head_;
  ResBlock rb_d0_, rb_d1_, rb_m1_, rb_m2_, rb_u1_, rb_u0_;
  Norm head_gn_;
  Lin time_lin1_, time_lin2_;
  Index cond_off_ = 0;
  int conv_count_ = 0, norm_count_ = 0, silu_count_ = 0, lin_count_ = 0;
  int time_silu_ = -1, head_silu_ = -1;
  std::vector<Conv*> conv_list_;
  std::vector<Norm*> norm_list_;
  std::vector<Lin*> lin_list_;
  std::set<std::string> zero_init_;

  auto cond_table() const {
    return Eigen::Map<const MatX<S>>(arena_.data.data() + cond_off_, cfg_.emb_dim, cfg_.vocab);
  }
  auto cond_table_grad(ParamArena<S>& g) const {
    return Eigen::Map<MatX<S>>(g.grad.data() + cond_off_, cfg_.emb_dim, cfg_.vocab);
  }

  Conv make_conv(const std::string& name, int cin, int cout, int k, int stride, int pad) {
    Conv c;
    c.cin = cin;
    c.cout = cout;
    c.k = k;
    c.stride = stride;
    c.pad = pad;
    c.name = name;
    c.w_off = arena_.allocate(name + ".w", Index(cin) * k * k * cout);
    c.b_off = arena_.allocate(name + ".b", cout);
    c.id = conv_count_++;
    return c;
  }
  Norm make_norm(const std::string& name, int channels) {
    Norm m;
    m.channels = channels;
    m.g_off = arena_.allocate(name + ".gamma", channels);
    m.b_off = arena_.allocate(name + ".beta", channels);
    m.id = norm_count_++;
    return m;
  }
  Lin make_lin(const std::string& name, int in, int out) {
    Lin l;
    l.in = in;
    l.out = out;
    l.w_off = arena_.allocate(name + ".w", Index(in) * out);
    l.b_off = arena_.allocate(name + ".b", out);
    l.id = lin_count_++;
    return l;
  }
  ResBlock make_resblock(const std::string& name, int cin, int cout) {
    ResBlock rb;
    rb.cin = cin;
    rb.cout = cout;
    rb.gn1 = make_norm(name + ".gn1", cin);
    rb.conv1 = make_conv(name + ".conv1", cin, cout, 3, 1, 1);
    rb.emb_lin = make_lin(name + ".emb", cfg_.emb_dim, cout);
    rb.gn2 = make_norm(name + ".gn2", cout);
    rb.conv2 = make_conv(name + ".conv2", cout, cout, 3, 1, 1);
    zero_init_.insert(name + ".conv2");
    rb.has_skip_conv = cin != cout;
    if (rb.has_skip_conv) rb.skip = make_conv(name + ".skip", cin, cout, 1, 1, 0);
    rb.silu1 = silu_count_++;
    rb.silu2 = silu_count_++;
    return rb;
  }

  void build() {
    if (cfg_.res % 4 != 0) throw std::invalid_argument("denoiser: res must be divisible by 4");
    const int b0 = cfg_.width(0), b1 = cfg_.width(1), b2 = cfg_.width(2);
    time_lin1_ = make_lin("time.lin1", cfg_.time_feat_dim, cfg_.emb_dim);
    time_lin2_ = make_lin("time.lin2", cfg_.emb_dim, cfg_.emb_dim);
    time_silu_ = silu_count_++;
    cond_off_ = arena_.allocate("cond.table", Index(cfg_.vocab) * cfg_.emb_dim);

    stem_ = make_conv("stem", cfg_.in_channels(), b0, 3, 1, 1);
    rb_d0_ = make_resblock("down0.rb", b0, b0);
    down0_ = make_conv("down0.pool", b0, b0, 3, 2, 1);
    rb_d1_ = make_resblock("down1.rb", b0, b1);
    down1_ = make_conv("down1.pool", b1, b1, 3, 2, 1);
    rb_m1_ = make_resblock("mid.rb1", b1, b2);
    rb_m2_ = make_resblock("mid.rb2", b2, b2);
    upc1_ = make_conv("up1.conv", b2, b1, 3, 1, 1);
    rb_u1_ = make_resblock("up1.rb", b1 + b1, b1);
    upc0_ = make_conv("up0.conv", b1, b0, 3, 1, 1);
    rb_u0_ = make_resblock("up0.rb", b0 + b0, b0);
    head_gn_ = make_norm("head.gn", b0);
    head_silu_ = silu_count_++;
    head_ = make_conv("head.conv", b0, cfg_.img_channels, 3, 1, 1);
    zero_init_.insert("head.conv");

    for (Conv* c : {&stem_, &down0_, &down1_, &upc1_, &upc0_, &head_}) conv_list_.push_back(c);
    for (ResBlock* rb : {&rb_d0_, &rb_d1_, &rb_m1_, &rb_m2_, &rb_u1_, &rb_u0_}) {
      conv_list_.push_back(&rb->conv1);
      conv_list_.push_back(&rb->conv2);
      if (rb->has_skip_conv) conv_list_.push_back(&rb->skip);
      norm_list_.push_back(&rb->gn1);
      norm_list_.push_back(&rb->gn2);
      lin_list_.push_back(&rb->emb_lin);
    }
    norm_list_.push_back(&head_gn_);
    lin_list_.push_back(&time_lin1_);
    lin_list_.push_back(&time_lin2_);
    arena_.finalize();
  }

  MatX<S> conv_forward(const Conv& c, const MatX<S>& X, int n, int h, int w,
                       DenoiserWorkspace<S>& ws, const AdapterStack<S>* ad) const {
    auto& P = ws.conv_P[std::size_t(c.id)];
    im2col(X, n, h, w, c.k, c.stride, c.pad, P);
    ws.conv_in[std::size_t(c.id)] = X;
    Eigen::Map<const MatX<S>> W(arena_.data.data() + c.w_off, Index(c.cin) * c.k * c.k, c.cout);
    Eigen::Map<const Eigen::Matrix<S, 1, Eigen::Dynamic>> b(arena_.data.data() + c.b_off, c.cout);
    MatX<S> Y = P * W;
    Y.rowwise() += b;
    if (ad) {
      Eigen::Map<const MatX<S>> A(ad->arena.data.data() + ad->a_off[std::size_t(c.id)],
                                  Index(c.cin) * c.k * c.k, ad->rank);
      Eigen::Map<const MatX<S>> B(ad->arena.data.data() + ad->b_off[std::size_t(c.id)], ad->rank,
                                  c.cout);
      ws.conv_lora_h[std::size_t(c.id)].noalias() = P * A;
      Y.noalias() += ws.conv_lora_h[std::size_t(c.id)] * B;
    }
    return Y;
  }

  MatX<S> conv_backward(const Conv& c, const MatX<S>& dY, int n, int h, int w,
                        DenoiserWorkspace<S>& ws, Grads& g) const {
    const auto& P = ws.conv_P[std::size_t(c.id)];
    Eigen::Map<const MatX<S>> W(arena_.data.data() + c.w_off, Index(c.cin) * c.k * c.k, c.cout);
    if (g.base) {
      Eigen::Map<MatX<S>> dW(g.base->grad.data() + c.w_off, Index(c.cin) * c.k * c.k, c.cout);
      dW.noalias() += P.transpose() * dY;
      Eigen::Map<Eigen::Matrix<S, 1, Eigen::Dynamic>> db(g.base->grad.data() + c.b_off, c.cout);
      db += dY.colwise().sum();
    }
    MatX<S> dP = dY * W.transpose();
    if (g.ad) {
      Eigen::Map<const MatX<S>> A(g.ad->arena.data.data() + g.ad->a_off[std::size_t(c.id)],
                                  Index(c.cin) * c.k * c.k, g.ad->rank);
      Eigen::Map<const MatX<S>> B(g.ad->arena.data.data() + g.ad->b_off[std::size_t(c.id)],
                                  g.ad->rank, c.cout);
      MatX<S> dYB = dY * B.transpose();
      if (g.ad_g) {
        Eigen::Map<MatX<S>> dA(g.ad_g->arena.grad.data() + g.ad->a_off[std::size_t(c.id)],
                               Index(c.cin) * c.k * c.k, g.ad->rank);
        Eigen::Map<MatX<S>> dB(g.ad_g->arena.grad.data() + g.ad->b_off[std::size_t(c.id)],
                               g.ad->rank, c.cout);
        dA.noalias() += P.transpose() * dYB;
        dB.noalias() += ws.conv_lora_h[std::size_t(c.id)].transpose() * dY;
      }
      dP.noalias() += dYB * A.transpose();
    }
    MatX<S> dX = MatX<S>::Zero(Index(n) * h * w, c.cin);
    col2im(dP, n, h, w, c.k, c.stride, c.pad, dX);
    return dX;
  }

  MatX<S> norm_forward(const Norm& m, const MatX<S>& X, int n, DenoiserWorkspace<S>& ws) const {
    auto gamma = arena_.data.segment(m.g_off, m.channels);
    auto beta = arena_.data.segment(m.b_off, m.channels);
    return groupnorm_forward(X, n, cfg_.groups, gamma, beta, ws.gn[std::size_t(m.id)]);
  }

  MatX<S> norm_backward(const Norm& m, const MatX<S>& dY, int n, DenoiserWorkspace<S>& ws,
                        Grads& g) const {
    auto gamma = arena_.data.segment(m.g_off, m.channels);
    if (g.base) {
      auto dgamma = g.base->grad.segment(m.g_off, m.channels);
      auto dbeta = g.base->grad.segment(m.b_off, m.channels);
      return groupnorm_backward(dY, n, cfg_.groups, gamma, ws.gn[std::size_t(m.id)],
                                [&](Index i) -> S& { return dgamma[i]; },
                                [&](Index i) -> S& { return dbeta[i]; });
    }
    S sink = 0;
    return groupnorm_backward(dY, n, cfg_.groups, gamma, ws.gn[std::size_t(m.id)],
                              [&](Index) -> S& { return sink; },
                              [&](Index) -> S& { return sink; });
  }

  MatX<S> silu_at(int id, const MatX<S>& X, DenoiserWorkspace<S>& ws) const {
    ws.silu_in[std::size_t(id)] = X;
    return silu(X);
  }
  MatX<S> silu_backward_at(int id, const MatX<S>& dY, DenoiserWorkspace<S>& ws) const {
    return silu_backward(dY, ws.silu_in[std::size_t(id)]);
  }

  MatX<S> lin_forward(const Lin& l, const MatX<S>& X, DenoiserWorkspace<S>& ws) const {
    ws.lin_in[std::size_t(l.id)] = X;
    Eigen::Map<const MatX<S>> W(arena_.data.data() + l.w_off, l.in, l.out);
    Eigen::Map<const Eigen::Matrix<S, 1, Eigen::Dynamic>> b(arena_.data.data() + l.b_off, l.out);
    MatX<S> Y = X * W;
    Y.rowwise() += b;
    return Y;
  }

  MatX<S> lin_backward(const Lin& l, const MatX<S>& dY, DenoiserWorkspace<S>& ws,
                       Grads& g) const {
    Eigen::Map<const MatX<S>> W(arena_.data.data() + l.w_off, l.in, l.out);
    if (g.base) {
      Eigen::Map<MatX<S>> dW(g.base->grad.data() + l.w_off, l.in, l.out);
      dW.noalias() += ws.lin_in[std::size_t(l.id)].transpose() * dY;
      Eigen::Map<Eigen::Matrix<S, 1, Eigen::Dynamic>> db(g.base->grad.data() + l.b_off, l.out);
      db += dY.colwise().sum();
    }
    return dY * W.transpose();
  }

  MatX<S> resblock_forward(const ResBlock& rb, const MatX<S>& X, int n, int h, int w,
                           DenoiserWorkspace<S>& ws, const AdapterStack<S>* ad) const {
    MatX<S> h1 = norm_forward(rb.gn1, X, n, ws);
    MatX<S> s1 = silu_at(rb.silu1, h1, ws);
    MatX<S> c1 = conv_forward(rb.conv1, s1, n, h, w, ws, ad);
    MatX<S> proj = lin_forward(rb.emb_lin, ws.emb_silu, ws);
    const Index hw = Index(h) * w;
    for (int b = 0; b < n; ++b) c1.middleRows(Index(b) * hw, hw).rowwise() += proj.row(b);
    MatX<S> h2 = norm_forward(rb.gn2, c1, n, ws);
    MatX<S> s2 = silu_at(rb.silu2, h2, ws);
    MatX<S> c2 = conv_forward(rb.conv2, s2, n, h, w, ws, ad);
    if (rb.has_skip_conv) return c2 + conv_forward(rb.skip, X, n, h, w, ws, ad);
    return c2 + X;
  }

  MatX<S> resblock_backward(const ResBlock& rb, const MatX<S>& dY, int n, int h, int w,
                            DenoiserWorkspace<S>& ws, Grads& g) const {
    MatX<S> d = conv_backward(rb.conv2, dY, n, h, w, ws, g);
    d = silu_backward_at(rb.silu2, d, ws);
    d = norm_backward(rb.gn2, d, n, ws, g);
    const Index hw = Index(h) * w;
    MatX<S> dproj(n, rb.cout);
    for (int b = 0; b < n; ++b) dproj.row(b) = d.middleRows(Index(b) * hw, hw).colwise().sum();
    ws.demb_silu += lin_backward(rb.emb_lin, dproj, ws, g);
    d = conv_backward(rb.conv1, d, n, h, w, ws, g);
    d = silu_backward_at(rb.silu1, d, ws);
    MatX<S> dX = norm_backward(rb.gn1, d, n, ws, g);
    if (rb.has_skip_conv)
      dX += conv_backward(rb.skip, dY, n, h, w, ws, g);
    else
      dX += dY;
    return dX;
  }
};

/// Weighted denoising objective: omega(t) * ||pred - eps||^2 summed over all
/// elements of the batch. The gradient wrt pred is 2*omega*(pred - eps).
template <class S>
double diffusion_loss(const MatX<S>& pred, const MatX<S>& eps, const std::vector<double>& weight,
                      int n, MatX<S>* dpred = nullptr) {
  const Index hw = pred.rows() / n;
  double loss = 0.0;
  if (dpred) dpred->resize(pred.rows(), pred.cols());
  for (int b = 0; b < n; ++b) {
    auto pb = pred.middleRows(Index(b) * hw, hw);
    auto eb = eps.middleRows(Index(b) * hw, hw);
    loss += weight[std::size_t(b)] * double((pb - eb).squaredNorm());
    if (dpred)
      dpred->middleRows(Index(b) * hw, hw) = S(2.0 * weight[std::size_t(b)]) * (pb - eb);
  }
  return loss;
}

}  // namespace sdlab::diffusion
